use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lpa_core::config::RunConfig;
use lpa_core::experiment;
use lpa_core::Result;

#[derive(Parser)]
#[command(
    name = "lpa",
    version,
    about = "Locality-preserved attention experiments at desk scale"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Class-incremental training with rehearsal and distillation.
    TrainCil,
    /// Joint training from scratch on the classes presented up to each task.
    TrainJoint,
    /// Avg accuracy against λ₀ (`ablate.lambdas`).
    AblateLambda,
    /// Avg accuracy against the number of LPA blocks (`ablate.lpa_layers`).
    AblateLpaLayers,
    /// Class-token attention rollout of one image as a PGM heatmap.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IMG1 file holding the image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Covariance spectrum of the representations of a dataset.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IMG1 file; defaults to the configured test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &common.set {
        cfg.apply_override(assignment)?;
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.common)?;
    match cli.command {
        Command::TrainCil => {
            let r = experiment::train_cil(&cfg)?;
            for run in &r.runs {
                println!(
                    "seed {}: last {:.4} avg {:.4} forgetting {:.4}",
                    run.seed, run.metrics.last, run.metrics.avg, run.metrics.forgetting
                );
            }
            println!(
                "mean: last {:.4} avg {:.4} forgetting {:.4}",
                r.mean.last, r.mean.avg, r.mean.forgetting
            );
        }
        Command::TrainJoint => {
            let r = experiment::train_joint(&cfg)?;
            for seed in &r.runs {
                for p in &seed.points {
                    println!(
                        "seed {} task {}: {} classes, accuracy {:.4}",
                        seed.seed, p.task, p.classes, p.accuracy
                    );
                }
            }
        }
        Command::AblateLambda | Command::AblateLpaLayers => {
            let table = match cli.command {
                Command::AblateLambda => experiment::ablate_lambda(&cfg)?,
                _ => experiment::ablate_lpa_layers(&cfg)?,
            };
            for (value, avg) in &table.mean_avg {
                println!("{} = {value}: mean avg {avg:.4}", table.factor);
            }
        }
        Command::Rollout {
            checkpoint,
            image,
            index,
        } => {
            let r = experiment::rollout(&cfg, &checkpoint, &image, index)?;
            println!(
                "rollout of image {} over layers {}..={}",
                r.image_index, r.from_layer, r.to_layer
            );
        }
        Command::Spectrum { checkpoint, data } => {
            let r = experiment::spectrum(&cfg, &checkpoint, data.as_deref())?;
            println!(
                "{} eigenvalues, sum {:.6e}, trace {:.6e}",
                r.eigenvalues.len(),
                r.eigen_sum,
                r.trace
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
