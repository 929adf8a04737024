//! Command-line runner for staged experiments, verification, and plot
//! data emission.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cca_lab::config::{parse_config, ExperimentConfig};
use cca_lab::pipeline::{emit_plot_data, run_pipeline, write_atomic, PipelineOutcome, PlotKind, Stage};
use cca_lab::verify::run_verification;

#[derive(Parser)]
#[command(
    name = "cca-lab",
    version,
    about = "Exact laboratory for contrastive alignment and guided sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the true distribution and pretrain the base model.
    Pretrain(StageArgs),
    /// Run stages through alignment.
    Align(StageArgs),
    /// Run stages through evaluation.
    Eval(StageArgs),
    /// Run stages through the trade-off sweep.
    Sweep(StageArgs),
    /// Run the full pipeline.
    Run(StageArgs),
    /// Execute the built-in invariant suite and print a pass/fail table.
    Verify,
    /// Flatten metrics, sweep, or trajectory files into tidy CSV.
    EmitPlotData(EmitArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker thread count (0 picks the default).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the trajectory record interval.
    #[arg(long)]
    record_every: Option<usize>,
}

#[derive(Args)]
struct EmitArgs {
    /// Plot kind: tradeoff_curve or trajectory.
    #[arg(long)]
    kind: String,
    /// Input JSON-lines files (metrics, sweep, or trajectory).
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(args: &StageArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut config = match parse_config(&text) {
        Ok(config) => config,
        Err(issues) => {
            eprintln!("{} is invalid:", args.config.display());
            for issue in &issues {
                eprintln!("  {issue}");
            }
            std::process::exit(2);
        }
    };
    if let Some(out) = &args.out {
        config.run.out_dir = out.display().to_string();
    }
    if let Some(seed) = args.seed {
        config.run.master_seed = seed;
    }
    if let Some(jobs) = args.jobs {
        config.run.jobs = jobs;
    }
    if let Some(record_every) = args.record_every {
        anyhow::ensure!(record_every >= 1, "--record-every must be at least 1");
        config.run.record_every = record_every;
    }
    Ok(config)
}

fn run_stage(args: &StageArgs, through: Stage) -> Result<()> {
    let config = load_config(args)?;
    let outcome = run_pipeline(&config, through)?;
    report_outcome(&outcome);
    Ok(())
}

fn report_outcome(outcome: &PipelineOutcome) {
    if !outcome.ran.is_empty() {
        println!("ran: {}", outcome.ran.join(", "));
    }
    if !outcome.resumed.is_empty() {
        println!("resumed from disk: {}", outcome.resumed.join(", "));
    }
    println!("artifacts in {}", outcome.out_dir.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain(args) => run_stage(&args, Stage::Pretrain),
        Command::Align(args) => run_stage(&args, Stage::Align),
        Command::Eval(args) => run_stage(&args, Stage::Eval),
        Command::Sweep(args) | Command::Run(args) => run_stage(&args, Stage::Sweep),
        Command::Verify => {
            let report = run_verification(None);
            print!("{}", report.render());
            if !report.all_passed() {
                std::process::exit(1);
            }
            Ok(())
        }
        Command::EmitPlotData(args) => {
            let kind = PlotKind::parse(&args.kind)?;
            let csv = emit_plot_data(&args.files, kind)?;
            match &args.out {
                Some(path) => {
                    write_atomic(path, csv.as_bytes())?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}
