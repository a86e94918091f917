//! `aptw` — the attention-prompt-tuning workbench CLI.
//!
//! Exit codes: 0 success, 1 check failure (e.g. a gradient check that ran
//! but found errors above tolerance), 2 config error, 3 invariant breach,
//! 4 artifact mismatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use apt_core::commands;
use apt_core::config::preset_arch;
use apt_core::data::ViewSpec;
use apt_core::error::AptError;

#[derive(Parser)]
#[command(
    name = "aptw",
    version,
    about = "Attention prompt tuning workbench: train, evaluate and cost-model prompt-tuned video transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train per a TOML run config; writes metrics.jsonl and checkpoint.aptc
    Train(TrainArgs),
    /// Evaluate a checkpoint on an APTD dataset with multi-view testing
    Eval(EvalArgs),
    /// Print the parameter/FLOPs cost table as CSV
    Cost(CostArgs),
    /// Check analytic gradients against 64-bit central finite differences
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic motion-classification video dataset (APTD)
    Datagen(DatagenArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the TOML run configuration
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// APTC checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// APTD dataset to evaluate on
    #[arg(long)]
    data: PathBuf,
    /// Temporal clips per video
    #[arg(long, default_value_t = 1)]
    temporal_clips: usize,
    /// Spatial crops per clip
    #[arg(long, default_value_t = 3)]
    spatial_views: usize,
}

#[derive(Args)]
struct CostArgs {
    /// Backbone preset: tiny, toy, vit-small-video, vit-base-video
    #[arg(long)]
    preset: String,
    /// Number of classifier classes
    #[arg(long)]
    classes: usize,
    /// Tuning modes to report: full, linear-probe, vpt-deep, apt
    #[arg(long, value_delimiter = ',', default_value = "linear-probe,apt,vpt-deep")]
    modes: Vec<String>,
    /// Prompt lengths for the prompt-based modes
    #[arg(long, value_delimiter = ',', default_value = "400")]
    prompt_lengths: Vec<usize>,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Path to the TOML run configuration (the check runs in 64-bit)
    #[arg(long)]
    config: PathBuf,
    /// Maximum allowed relative error
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Negative control: leak a term the tape cannot see, so the check fails
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct DatagenArgs {
    /// Where to write the APTD file
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Number of motion-direction classes (4 or 8)
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
}

fn exit_code_for(e: &AptError) -> u8 {
    match e {
        AptError::Config(_) => 2,
        AptError::InvariantBreach(_) => 3,
        AptError::ArtifactMismatch(_) => 4,
        AptError::Io(_) => 2,
    }
}

fn run(cmd: Cmd) -> apt_core::error::Result<u8> {
    match cmd {
        Cmd::Train(a) => {
            let summary = commands::cmd_train(&a.config)?;
            for m in &summary.metrics {
                let line = serde_json::to_string(m)
                    .map_err(|e| AptError::invariant(format!("metrics serialize: {e}")))?;
                println!("{line}");
            }
            eprintln!(
                "wrote {} and {}",
                summary.metrics_path.display(),
                summary.checkpoint_path.display()
            );
            if let Some(p) = &summary.test_data_path {
                eprintln!("held-out split: {}", p.display());
            }
            Ok(0)
        }
        Cmd::Eval(a) => {
            let views = ViewSpec {
                temporal_clips: a.temporal_clips,
                spatial_views: a.spatial_views,
            };
            let report = commands::cmd_eval(&a.checkpoint, &a.data, &views)?;
            let line = serde_json::to_string(&report)
                .map_err(|e| AptError::invariant(format!("report serialize: {e}")))?;
            println!("{line}");
            Ok(0)
        }
        Cmd::Cost(a) => {
            let arch = preset_arch(&a.preset, a.classes)?;
            let modes = commands::cost_modes(&a.modes, &a.prompt_lengths)?;
            let csv = commands::cmd_cost(&arch, &modes)?;
            match &a.output {
                Some(p) => std::fs::write(p, &csv)?,
                None => print!("{csv}"),
            }
            Ok(0)
        }
        Cmd::Gradcheck(a) => {
            let summary = commands::cmd_gradcheck(&a.config, a.tol, a.corrupt)?;
            for line in summary.lines() {
                println!("{line}");
            }
            Ok(if summary.pass() { 0 } else { 1 })
        }
        Cmd::Datagen(a) => {
            let summary = commands::cmd_datagen(
                &a.output,
                a.seed,
                a.samples,
                (a.frames, a.height, a.width, a.channels),
                a.classes,
                a.noise_sigma,
            )?;
            eprintln!(
                "wrote {} ({} samples, {} classes)",
                summary.path.display(),
                summary.samples,
                summary.num_classes
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
