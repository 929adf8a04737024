//! End-to-end tests of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cca-lab"))
}

fn fixture_config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("..")
        .join("..")
        .join("configs")
        .join("fixture.cfg")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

#[test]
fn run_executes_and_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["run", "--config"])
        .arg(fixture_config())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    let text = stdout_of(&output);
    assert!(text.contains("ran: spec, pretrain, align, eval, sweep"), "{text}");
    for name in ["spec.txt", "pretrained.model", "aligned.model", "metrics.jsonl", "sweep.jsonl"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }

    let output = bin()
        .args(["run", "--config"])
        .arg(fixture_config())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = stdout_of(&output);
    assert!(text.contains("resumed from disk"), "{text}");
    assert!(!text.contains("ran:"), "{text}");
}

#[test]
fn stage_subcommands_stop_early() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["pretrain", "--config"])
        .arg(fixture_config())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    assert!(dir.path().join("pretrained.model").exists());
    assert!(!dir.path().join("aligned.model").exists());

    let output = bin()
        .args(["align", "--config"])
        .arg(fixture_config())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    let text = stdout_of(&output);
    assert!(text.contains("resumed from disk: spec, pretrain"), "{text}");
    assert!(dir.path().join("aligned.model").exists());
    assert!(!dir.path().join("metrics.jsonl").exists());
}

#[test]
fn seed_override_changes_the_numbers() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&dir_a, "7"), (&dir_b, "8")] {
        let output = bin()
            .args(["eval", "--config"])
            .arg(fixture_config())
            .arg("--out")
            .arg(dir.path())
            .args(["--seed", seed])
            .output()
            .unwrap();
        assert!(output.status.success(), "{}", stderr_of(&output));
    }
    let a = std::fs::read(dir_a.path().join("metrics.jsonl")).unwrap();
    let b = std::fs::read(dir_b.path().join("metrics.jsonl")).unwrap();
    assert_ne!(a, b, "different master seeds produced identical metrics");
}

#[test]
fn invalid_config_reports_every_issue_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.cfg");
    std::fs::write(
        &config_path,
        "[pretrain]\nsteps = -4\ndropout_prob = 1.5\nbogus_key = 1\n",
    )
    .unwrap();
    let output = bin()
        .args(["run", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let text = stderr_of(&output);
    assert!(text.contains("line 2"), "{text}");
    assert!(text.contains("line 3"), "{text}");
    assert!(text.contains("line 4"), "{text}");
}

#[test]
fn missing_config_fails_with_its_path() {
    let output = bin()
        .args(["run", "--config", "/nonexistent/conf.cfg"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(stderr_of(&output).contains("/nonexistent/conf.cfg"));
}

#[test]
fn emit_plot_data_writes_csv_to_stdout_and_file() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["run", "--config"])
        .arg(fixture_config())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));

    let output = bin()
        .args(["emit-plot-data", "--kind", "tradeoff_curve"])
        .arg(dir.path().join("sweep.jsonl"))
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    let csv = stdout_of(&output);
    assert!(csv.starts_with(
        "axis_value,fidelity,diversity,kl_to_target,tv_to_target,loss_kind,seed\n"
    ));
    assert_eq!(csv.lines().count(), 5);

    let csv_path = dir.path().join("curve.csv");
    let output = bin()
        .args(["emit-plot-data", "--kind", "trajectory"])
        .arg(dir.path().join("trajectory.jsonl"))
        .arg("--out")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    let written = std::fs::read_to_string(&csv_path).unwrap();
    assert!(written.starts_with("step,loss,mean_logp_pos,mean_logp_neg,kl_to_target\n"));
}

#[test]
fn emit_plot_data_rejects_unknown_kind() {
    let output = bin()
        .args(["emit-plot-data", "--kind", "histogram", "whatever.jsonl"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(stderr_of(&output).contains("histogram"));
}

#[test]
fn verify_passes_and_prints_the_table() {
    let output = bin().arg("verify").output().unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    let text = stdout_of(&output);
    assert!(text.contains("22/22 checks passed"), "{text}");
    assert!(text.contains("softmax rows normalize"), "{text}");
}
