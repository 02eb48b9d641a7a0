use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mocca_cli::commands::{self, ScoreArgs, TrainOverrides};
use mocca_core::data::Split;
use mocca_core::objective::{BoundaryMode, LayerSet};
use mocca_core::scoring::Eq8Variant;
use mocca_core::verify::SuiteConfig;

#[derive(Parser)]
#[command(name = "mocca", version, about = "Multi-layer one-class anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Dataset manifest (overrides data.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (overrides output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    boundary: Option<BoundaryMode>,
    /// Comma-separated layer indices, e.g. `1,2,3`.
    #[arg(long)]
    layers: Option<LayerSet>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(self) -> TrainOverrides {
        TrainOverrides {
            manifest: self.manifest,
            out: self.out,
            boundary: self.boundary,
            layers: self.layers,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a manifest split with a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config supplying preprocessing and score settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Maximum over non-overlapping patches of the resized image.
        #[arg(long)]
        patch: bool,
        /// Frame scores over sliding clips of each image sequence.
        #[arg(long)]
        seq: bool,
        #[arg(long)]
        eq8_variant: Option<Eq8Variant>,
        #[arg(long)]
        recon_weight: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Compute AUC, maxBA, ROC and CDF reports from a scores file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train and score every configured layer subset over every seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Emit the configured synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check every differentiable operator against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, common } => {
            let dir = commands::train(&config, &common.overrides())?;
            println!("wrote {}", dir.display());
        }
        Command::Score {
            checkpoint,
            config,
            split,
            patch,
            seq,
            eq8_variant,
            recon_weight,
            common,
        } => {
            let dir = commands::score(&ScoreArgs {
                checkpoint,
                config,
                manifest: common.manifest,
                out: common.out,
                split: Some(split),
                boundary: common.boundary,
                layers: common.layers,
                patch,
                seq,
                eq8_variant,
                recon_weight,
            })?;
            println!("wrote {}", dir.join("scores.csv").display());
        }
        Command::Eval {
            scores,
            manifest,
            out,
            split,
        } => {
            let dir = commands::eval(&scores, &manifest, split, &out)?;
            println!("wrote {}", dir.join("eval").display());
        }
        Command::Ablate { config, threads, common } => {
            let dir = commands::ablate(&config, &common.overrides(), threads)?;
            println!("wrote {}", dir.join("ablation.csv").display());
        }
        Command::Synth { config, out, seed } => {
            let m = commands::synth(config.as_deref(), &out, seed)?;
            println!("wrote {}", m.display());
        }
        Command::Gradcheck { trials, seed, out } => {
            let cfg = SuiteConfig {
                trials,
                seed,
                ..Default::default()
            };
            let report = commands::gradcheck(&cfg, out.as_deref())?;
            let mut ok = true;
            for c in &report {
                println!(
                    "{:<22} {:>5} checks {:>3} failed  worst {:.3e}",
                    c.operator, c.checks, c.failures, c.worst_deviation
                );
                if let Some(f) = &c.first_failure {
                    println!("    {f}");
                }
                ok &= c.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
