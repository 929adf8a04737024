//! Experiment orchestration: staged runs, persistence, resumability.
//!
//! A run lives in one output directory. Every stage persists its
//! artifacts atomically and records itself in the manifest, so a rerun
//! resumes from whatever finished and reproduces the rest bit-for-bit.
//! The manifest's timestamps are the only non-deterministic bytes in a
//! run directory; every numeric artifact is byte-identical across
//! reruns with the same config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{train, DataSource, OracleAttachment, TrainTrajectory, TrajectoryPoint};
use crate::config::{serialize_config, AlignLossKind, ExperimentConfig, LambdaMode};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_policy, model_policy, tradeoff_sweep, MetricsRecord, SweepRecord, SweepSettings,
};
use crate::guidance::{
    classifier_guided_sequence_distribution, guided_sequence_distribution, train_classifier,
    GuidanceKind, UncondSource,
};
use crate::model::TabularArModel;
use crate::oracle::TrueDistributionSpec;
use crate::rng::{derive_seed, stream};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
/// Empirical classifier training settings for classifier-guided eval.
const CLASSIFIER_STEPS: usize = 4000;
const CLASSIFIER_LEARNING_RATE: f64 = 0.5;

/// Write a file atomically: write to a sibling temp path, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    if !parent.as_os_str().is_empty() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("path {} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// SHA-256 of a byte string, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Spec,
    Pretrain,
    Align,
    Eval,
    Sweep,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Spec,
        Stage::Pretrain,
        Stage::Align,
        Stage::Eval,
        Stage::Sweep,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Spec => "spec",
            Stage::Pretrain => "pretrain",
            Stage::Align => "align",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
        }
    }
}

/// Completion record of one stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageStatus {
    /// "done" or "skipped".
    pub status: String,
    /// Output files, relative to the run directory.
    pub paths: Vec<String>,
}

/// Bookkeeping for one run directory. Written before the first stage
/// starts and updated atomically after each stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_sha256: String,
    pub model_format_version: u32,
    pub spec_format_version: u32,
    /// Free-text revision of the code that produced the run.
    pub revision: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub stages: BTreeMap<String, StageStatus>,
}

impl RunManifest {
    fn new(config_sha256: String) -> Self {
        let now = unix_now();
        RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            config_sha256,
            model_format_version: crate::model::MODEL_FORMAT_VERSION,
            spec_format_version: crate::oracle::SPEC_FORMAT_VERSION,
            revision: format!("cca-lab {}", env!("CARGO_PKG_VERSION")),
            created_unix: now,
            updated_unix: now,
            stages: BTreeMap::new(),
        }
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.stages.contains_key(stage.name())
    }

    fn mark(&mut self, stage: Stage, status: &str, paths: &[&str]) {
        self.updated_unix = unix_now();
        self.stages.insert(
            stage.name().to_string(),
            StageStatus {
                status: status.into(),
                paths: paths.iter().map(|p| p.to_string()).collect(),
            },
        );
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Numeric(format!("manifest serialization failed: {e}")))?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad manifest: {e}")))
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// What one `run_pipeline` invocation did.
#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    /// Stages computed in this invocation.
    pub ran: Vec<&'static str>,
    /// Stages satisfied from persisted artifacts.
    pub resumed: Vec<&'static str>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| Error::Numeric(format!("row serialization failed: {e}")))?;
        text.push_str(&line);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (number, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| {
            Error::format(path, format!("line {}: {e}", number + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Evaluation rows produced by the eval stage, in persisted order.
fn eval_records(
    config: &ExperimentConfig,
    spec: &TrueDistributionSpec,
    pretrained: &TabularArModel,
    aligned: &TabularArModel,
    dataset: &[crate::oracle::DataPair],
) -> Result<Vec<MetricsRecord>> {
    let eval_scale = config.guidance.resolved_eval_scale();
    let master = config.run.master_seed;
    let mut records = Vec::new();

    let pretrained_eval =
        evaluate_policy(&model_policy(pretrained, spec)?, spec, eval_scale)?;
    records.push(MetricsRecord::from_evaluation(
        "pretrained",
        "mle",
        &pretrained_eval,
        derive_seed(master, "pretrain", 0),
    ));

    let aligned_eval = evaluate_policy(&model_policy(aligned, spec)?, spec, eval_scale)?;
    let mut aligned_record = MetricsRecord::from_evaluation(
        "aligned",
        config.align.loss.name(),
        &aligned_eval,
        derive_seed(master, "align", 0),
    );
    match config.align.loss {
        AlignLossKind::Cca => {
            aligned_record.beta = Some(config.align.beta);
            aligned_record.lambda = Some(config.align.lambda);
        }
        AlignLossKind::Dpo => aligned_record.beta_d = Some(config.align.beta_d),
        AlignLossKind::Unlearn => aligned_record.lambda_u = Some(config.align.lambda_u),
        AlignLossKind::Mle => {}
    }
    records.push(aligned_record);

    if config.guidance.kind != GuidanceKind::None {
        let guidance = config.guidance.guidance_spec();
        let classifier = if config.guidance.kind == GuidanceKind::Classifier {
            Some(train_classifier(
                *spec.space(),
                dataset,
                CLASSIFIER_STEPS,
                CLASSIFIER_LEARNING_RATE,
                &mut stream(master, "classifier", 0),
            )?)
        } else {
            None
        };
        for (label, model) in [("guided-pretrained", pretrained), ("guided-aligned", aligned)] {
            let policy: Vec<_> = (0..spec.space().num_conditions())
                .map(|c| match &classifier {
                    Some(classifier) => classifier_guided_sequence_distribution(
                        model,
                        classifier,
                        guidance.scale,
                        c,
                    ),
                    None => guided_sequence_distribution(
                        model,
                        UncondSource::MaskRow,
                        &guidance,
                        c,
                    ),
                })
                .collect::<Result<_>>()?;
            let evaluation = evaluate_policy(&policy, spec, eval_scale)?;
            let mut record = MetricsRecord::from_evaluation(
                label,
                config.guidance.kind.name(),
                &evaluation,
                master,
            );
            record.scale = Some(match config.guidance.kind {
                GuidanceKind::CfgV2 => config.guidance.terminal_scale.unwrap_or(0.0),
                _ => config.guidance.scale,
            });
            records.push(record);
        }
    }
    Ok(records)
}

/// Run the pipeline through `through`, resuming finished stages from the
/// output directory. Rerunning with the same config and seed reproduces
/// every numeric artifact byte for byte.
pub fn run_pipeline(config: &ExperimentConfig, through: Stage) -> Result<PipelineOutcome> {
    let out_dir = PathBuf::from(&config.run.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    if config.run.jobs > 0 {
        // Only the first call can win; later calls keep the existing pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.run.jobs)
            .build_global();
    }

    let canonical = serialize_config(config);
    let config_hash = sha256_hex(canonical.as_bytes());
    let manifest_path = out_dir.join("manifest.json");
    let mut manifest = if manifest_path.exists() {
        let manifest = RunManifest::load(&manifest_path)?;
        if manifest.config_sha256 != config_hash {
            return Err(Error::Config(format!(
                "output directory {} holds a run with a different config \
                 (hash {} vs {}); choose another directory or restore the config",
                out_dir.display(),
                manifest.config_sha256,
                config_hash
            )));
        }
        manifest
    } else {
        let manifest = RunManifest::new(config_hash);
        manifest.save(&manifest_path)?;
        manifest
    };
    write_atomic(&out_dir.join("config.txt"), canonical.as_bytes())?;

    let mut outcome = PipelineOutcome {
        out_dir: out_dir.clone(),
        ..Default::default()
    };
    let master = config.run.master_seed;

    // Stage 1: generate (or reload) the true distribution.
    let spec_path = out_dir.join("spec.txt");
    let spec = if manifest.is_done(Stage::Spec) && spec_path.exists() {
        outcome.resumed.push(Stage::Spec.name());
        TrueDistributionSpec::load(&spec_path)?
    } else {
        let space = crate::space::SequenceSpace::new(
            config.spec.vocab_size,
            config.spec.seq_len,
            config.spec.num_conditions,
        )?;
        let seed = config
            .spec
            .seed
            .unwrap_or_else(|| derive_seed(master, "spec", 0));
        let spec = TrueDistributionSpec::generate(
            config.spec.family,
            space,
            config.spec.concentration,
            seed,
        )?;
        spec.save(&spec_path)?;
        manifest.mark(Stage::Spec, "done", &["spec.txt"]);
        manifest.save(&manifest_path)?;
        outcome.ran.push(Stage::Spec.name());
        spec
    };
    if through == Stage::Spec {
        return Ok(outcome);
    }

    // The dataset is regenerated deterministically from its own stream,
    // so it never needs to be persisted.
    let dataset = spec.sample_dataset(config.run.dataset_size, &mut stream(master, "dataset", 0));

    // Stage 2: pretrain by maximum likelihood with condition dropout.
    let pretrained_path = out_dir.join("pretrained.model");
    let pretrain_trajectory_path = out_dir.join("pretrain_trajectory.jsonl");
    let pretrained = if manifest.is_done(Stage::Pretrain) && pretrained_path.exists() {
        outcome.resumed.push(Stage::Pretrain.name());
        TabularArModel::load(&pretrained_path)?
    } else {
        let mut model = TabularArModel::uniform(*spec.space());
        let options = crate::alignment::TrainOptions {
            loss: crate::alignment::TrainLoss::MaximumLikelihood {
                dropout_prob: config.pretrain.dropout_prob,
            },
            steps: config.pretrain.steps,
            learning_rate: config.pretrain.learning_rate,
            batch_size: config.pretrain.batch_size,
            record_every: config.run.record_every,
        };
        let trajectory = train(
            &mut model,
            None,
            DataSource::Empirical(&dataset),
            &options,
            &mut stream(master, "pretrain", 0),
            None,
        )?;
        model.save(&pretrained_path)?;
        write_jsonl(&pretrain_trajectory_path, &trajectory.points)?;
        manifest.mark(
            Stage::Pretrain,
            "done",
            &["pretrained.model", "pretrain_trajectory.jsonl"],
        );
        manifest.save(&manifest_path)?;
        outcome.ran.push(Stage::Pretrain.name());
        model
    };
    if through == Stage::Pretrain {
        return Ok(outcome);
    }

    // Stage 3: align against the frozen pretrained reference.
    let aligned_path = out_dir.join("aligned.model");
    let trajectory_path = out_dir.join("trajectory.jsonl");
    let aligned = if manifest.is_done(Stage::Align) && aligned_path.exists() {
        outcome.resumed.push(Stage::Align.name());
        TabularArModel::load(&aligned_path)?
    } else {
        let lambda_per_condition = match (config.align.loss, config.align.lambda_mode) {
            (AlignLossKind::Cca, LambdaMode::Exact) => {
                let s = 1.0 / config.align.beta;
                Some(
                    (0..spec.space().num_conditions())
                        .map(|c| spec.lambda_c(c, s))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            _ => None,
        };
        let options = config
            .align
            .train_options(config.run.record_every, lambda_per_condition);
        let mut model = pretrained.clone();
        let oracle = OracleAttachment {
            spec: &spec,
            scale: config.guidance.resolved_eval_scale(),
        };
        let trajectory = train(
            &mut model,
            Some(&pretrained),
            DataSource::Empirical(&dataset),
            &options,
            &mut stream(master, "align", 0),
            Some(&oracle),
        )?;
        model.save(&aligned_path)?;
        write_jsonl(&trajectory_path, &trajectory.points)?;
        manifest.mark(Stage::Align, "done", &["aligned.model", "trajectory.jsonl"]);
        manifest.save(&manifest_path)?;
        outcome.ran.push(Stage::Align.name());
        model
    };
    if through == Stage::Align {
        return Ok(outcome);
    }

    // Stage 4: evaluate baselines, the aligned model, and guided
    // variants when guidance is configured.
    let metrics_path = out_dir.join("metrics.jsonl");
    if manifest.is_done(Stage::Eval) && metrics_path.exists() {
        outcome.resumed.push(Stage::Eval.name());
    } else {
        let records = eval_records(config, &spec, &pretrained, &aligned, &dataset)?;
        write_jsonl(&metrics_path, &records)?;
        manifest.mark(Stage::Eval, "done", &["metrics.jsonl"]);
        manifest.save(&manifest_path)?;
        outcome.ran.push(Stage::Eval.name());
    }
    if through == Stage::Eval {
        return Ok(outcome);
    }

    // Stage 5: optional trade-off sweep.
    let sweep_path = out_dir.join("sweep.jsonl");
    if manifest.is_done(Stage::Sweep) && (sweep_path.exists() || config.sweep.axis.is_none()) {
        outcome.resumed.push(Stage::Sweep.name());
    } else if let Some(axis) = config.sweep.axis {
        let align_options = config.align.train_options(config.run.record_every, None);
        let settings = SweepSettings {
            spec: &spec,
            pretrained: &pretrained,
            dataset: &dataset,
            align: align_options,
            eval_scale: config.guidance.resolved_eval_scale(),
            master_seed: master,
        };
        let records = tradeoff_sweep(&settings, axis, &config.sweep.grid)?;
        write_jsonl(&sweep_path, &records)?;
        manifest.mark(Stage::Sweep, "done", &["sweep.jsonl"]);
        manifest.save(&manifest_path)?;
        outcome.ran.push(Stage::Sweep.name());
    } else {
        manifest.mark(Stage::Sweep, "skipped", &[]);
        manifest.save(&manifest_path)?;
        outcome.ran.push(Stage::Sweep.name());
    }
    Ok(outcome)
}

/// Plot-data kinds for `emit_plot_data`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    TradeoffCurve,
    Trajectory,
}

impl PlotKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tradeoff_curve" => Ok(PlotKind::TradeoffCurve),
            "trajectory" => Ok(PlotKind::Trajectory),
            other => Err(Error::Input(format!(
                "unknown plot kind '{other}' (expected tradeoff_curve or trajectory)"
            ))),
        }
    }
}

fn format_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => v.to_string(),
        None => String::new(),
    }
}

/// Flatten metrics and sweep files into tidy CSV.
///
/// `tradeoff_curve` accepts both sweep rows and plain metrics rows and
/// emits columns (axis_value, fidelity, diversity, kl_to_target,
/// tv_to_target, loss_kind, seed) sorted by axis_value; failed sweep
/// points are skipped. `trajectory` accepts trajectory rows and emits
/// (step, loss, mean_logp_pos, mean_logp_neg, kl_to_target) in file
/// order.
pub fn emit_plot_data(paths: &[PathBuf], kind: PlotKind) -> Result<String> {
    match kind {
        PlotKind::TradeoffCurve => {
            let mut records: Vec<MetricsRecord> = Vec::new();
            for path in paths {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                for (number, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    // Sweep rows wrap a metrics record; metrics files
                    // hold the record directly.
                    if let Ok(sweep) = serde_json::from_str::<SweepRecord>(line) {
                        if let Some(metrics) = sweep.metrics {
                            records.push(metrics);
                        } else if sweep.error.is_some() {
                            continue;
                        } else if let Ok(metrics) = serde_json::from_str::<MetricsRecord>(line) {
                            records.push(metrics);
                        }
                        continue;
                    }
                    match serde_json::from_str::<MetricsRecord>(line) {
                        Ok(metrics) => records.push(metrics),
                        Err(e) => {
                            return Err(Error::format(
                                path,
                                format!("line {}: not a metrics or sweep row: {e}", number + 1),
                            ));
                        }
                    }
                }
            }
            records.sort_by(|a, b| {
                let ax = a.axis_value.unwrap_or(f64::NEG_INFINITY);
                let bx = b.axis_value.unwrap_or(f64::NEG_INFINITY);
                ax.total_cmp(&bx)
            });
            let mut csv = String::from(
                "axis_value,fidelity,diversity,kl_to_target,tv_to_target,loss_kind,seed\n",
            );
            for record in &records {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    format_opt(record.axis_value),
                    record.fidelity,
                    record.diversity,
                    record.kl_to_target,
                    record.tv_to_target,
                    record.loss_kind,
                    record.seed
                ));
            }
            Ok(csv)
        }
        PlotKind::Trajectory => {
            let mut csv =
                String::from("step,loss,mean_logp_pos,mean_logp_neg,kl_to_target\n");
            for path in paths {
                let points: Vec<TrajectoryPoint> = read_jsonl(path)?;
                for point in &points {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        point.step,
                        point.loss,
                        point.mean_logp_pos,
                        format_opt(point.mean_logp_neg),
                        format_opt(point.kl_to_target)
                    ));
                }
            }
            Ok(csv)
        }
    }
}

/// Load a persisted trajectory.
pub fn load_trajectory(path: &Path) -> Result<TrainTrajectory> {
    Ok(TrainTrajectory {
        points: read_jsonl(path)?,
    })
}

/// Load persisted metrics rows.
pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_jsonl(path)
}

/// Load persisted sweep rows.
pub fn load_sweep(path: &Path) -> Result<Vec<SweepRecord>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn fixture_config(out_dir: &Path) -> ExperimentConfig {
        let text = format!(
            "\
[spec]
family = random-dirichlet
vocab_size = 3
seq_len = 2
num_conditions = 3
concentration = 1

[run]
out_dir = {}
master_seed = 11
dataset_size = 512
record_every = 50

[pretrain]
steps = 300
learning_rate = 0.5
batch_size = 128
dropout_prob = 0.1

[align]
loss = cca
beta = 0.02
lambda = 1
steps = 100
learning_rate = 0.5
batch_size = 128
dropout_prob = 0.1

[guidance]
kind = cfg
scale = 1
eval_scale = 1

[sweep]
axis = cfg_s
grid = 0, 1, 2
",
            out_dir.display()
        );
        parse_config(&text).unwrap()
    }

    fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let name = entry.file_name().to_string_lossy().to_string();
            files.insert(name, std::fs::read(entry.path()).unwrap());
        }
        files
    }

    #[test]
    fn pipeline_runs_all_stages_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let config = fixture_config(dir.path());
        let outcome = run_pipeline(&config, Stage::Sweep).unwrap();
        assert_eq!(
            outcome.ran,
            vec!["spec", "pretrain", "align", "eval", "sweep"]
        );
        for name in [
            "manifest.json",
            "config.txt",
            "spec.txt",
            "pretrained.model",
            "pretrain_trajectory.jsonl",
            "aligned.model",
            "trajectory.jsonl",
            "metrics.jsonl",
            "sweep.jsonl",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        // A second invocation resumes everything.
        let outcome = run_pipeline(&config, Stage::Sweep).unwrap();
        assert!(outcome.ran.is_empty(), "reran: {:?}", outcome.ran);
        assert_eq!(outcome.resumed.len(), 5);

        let metrics = load_metrics(&dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.len(), 4);
        assert_eq!(metrics[0].run_id, "pretrained");
        assert_eq!(metrics[1].run_id, "aligned");
        assert_eq!(metrics[2].run_id, "guided-pretrained");
        assert_eq!(metrics[3].run_id, "guided-aligned");

        let sweep = load_sweep(&dir.path().join("sweep.jsonl")).unwrap();
        assert_eq!(sweep.len(), 3);

        let trajectory = load_trajectory(&dir.path().join("trajectory.jsonl")).unwrap();
        assert!(trajectory.points.len() >= 2);
        assert!(trajectory.points[0].kl_to_target.is_some());
    }

    #[test]
    fn reruns_are_byte_identical_and_resume_matches_fresh() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();

        // Run A: straight through.
        let mut config_a = fixture_config(dir_a.path());
        config_a.run.out_dir = dir_a.path().display().to_string();
        run_pipeline(&config_a, Stage::Sweep).unwrap();

        // Run B: interrupted after pretrain, then resumed to the end.
        let mut config_b = fixture_config(dir_b.path());
        config_b.run.out_dir = dir_b.path().display().to_string();
        run_pipeline(&config_b, Stage::Pretrain).unwrap();
        run_pipeline(&config_b, Stage::Sweep).unwrap();

        let files_a = read_dir_files(dir_a.path());
        let files_b = read_dir_files(dir_b.path());
        let names: Vec<&String> = files_a.keys().collect();
        assert_eq!(names, files_b.keys().collect::<Vec<_>>());
        for (name, bytes) in &files_a {
            if name == "manifest.json" {
                // Timestamps differ; everything else must not.
                continue;
            }
            let config_fixup = name == "config.txt";
            if config_fixup {
                // The out_dir field differs between the two directories.
                continue;
            }
            assert_eq!(
                bytes,
                files_b.get(name).unwrap(),
                "{name} differs between fresh and resumed runs"
            );
        }
    }

    #[test]
    fn changing_the_config_in_place_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fixture_config(dir.path());
        run_pipeline(&config, Stage::Spec).unwrap();
        config.run.master_seed = 999;
        let err = run_pipeline(&config, Stage::Spec).unwrap_err();
        assert!(err.to_string().contains("different config"), "{err}");
    }

    #[test]
    fn align_zero_steps_keeps_the_pretrained_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fixture_config(dir.path());
        config.align.steps = 0;
        config.sweep.axis = None;
        config.sweep.grid.clear();
        run_pipeline(&config, Stage::Eval).unwrap();
        let pretrained = TabularArModel::load(&dir.path().join("pretrained.model")).unwrap();
        let aligned = TabularArModel::load(&dir.path().join("aligned.model")).unwrap();
        assert_eq!(pretrained.logits().values(), aligned.logits().values());
        let metrics = load_metrics(&dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(metrics[0].kl_to_target, metrics[1].kl_to_target);
    }

    #[test]
    fn sweep_stage_skips_without_axis() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fixture_config(dir.path());
        config.sweep.axis = None;
        config.sweep.grid.clear();
        run_pipeline(&config, Stage::Sweep).unwrap();
        assert!(!dir.path().join("sweep.jsonl").exists());
        let manifest = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.stages.get("sweep").unwrap().status, "skipped");
    }

    #[test]
    fn plot_data_sorts_and_handles_empty() {
        let dir = tempfile::tempdir().unwrap();
        let config = fixture_config(dir.path());
        run_pipeline(&config, Stage::Sweep).unwrap();

        let csv = emit_plot_data(&[dir.path().join("sweep.jsonl")], PlotKind::TradeoffCurve)
            .unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "axis_value,fidelity,diversity,kl_to_target,tv_to_target,loss_kind,seed"
        );
        assert_eq!(lines.len(), 4);
        let axis_values: Vec<f64> = lines[1..]
            .iter()
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(axis_values, vec![0.0, 1.0, 2.0]);

        // Empty input: header only.
        let empty = dir.path().join("empty.jsonl");
        write_atomic(&empty, b"").unwrap();
        let csv = emit_plot_data(&[empty], PlotKind::TradeoffCurve).unwrap();
        assert_eq!(csv.lines().count(), 1);

        // Trajectory kind.
        let csv = emit_plot_data(
            &[dir.path().join("trajectory.jsonl")],
            PlotKind::Trajectory,
        )
        .unwrap();
        assert!(csv.starts_with("step,loss,mean_logp_pos,mean_logp_neg,kl_to_target\n"));
        assert!(csv.lines().count() > 2);
    }

    #[test]
    fn plot_data_reports_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.jsonl");
        write_atomic(&bad, b"not json\n").unwrap();
        let err = emit_plot_data(&[bad.clone()], PlotKind::TradeoffCurve).unwrap_err();
        assert!(err.to_string().contains("bad.jsonl"), "{err}");
        let missing = dir.path().join("missing.jsonl");
        let err = emit_plot_data(&[missing], PlotKind::TradeoffCurve).unwrap_err();
        assert!(err.to_string().contains("missing.jsonl"), "{err}");
    }

    #[test]
    fn atomic_write_creates_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("file.txt");
        write_atomic(&path, b"one").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"one");
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // No temp file left behind.
        let names: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
