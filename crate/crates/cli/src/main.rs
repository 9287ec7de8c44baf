use std::path::PathBuf;
use std::process::ExitCode;

use anchorinv_cli::commands::{self, Axis, BasePaths};
use anchorinv_cli::config::{self, ExperimentConfig};
use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "anchorinv", version, about = "Few-shot class-incremental learning with anchor-guided inversion")]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in `desk` preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "ANCHORINV_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base model and store its anchors.
    TrainBase,
    /// Run every configured method over the trial plan.
    Run {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        anchors: Option<PathBuf>,
    },
    /// Sweep one axis, one full run per value.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Invert every stored anchor and report the feature MAE.
    AuditInversion {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        anchors: Option<PathBuf>,
    },
    /// Print the text table of a JSON report.
    RenderReport { report: PathBuf },
    /// Print the fully resolved config.
    ShowConfig,
}

fn base_paths(out: &std::path::Path, checkpoint: Option<PathBuf>, anchors: Option<PathBuf>) -> BasePaths {
    let d = BasePaths::under(out);
    BasePaths {
        checkpoint: checkpoint.unwrap_or(d.checkpoint),
        anchors: anchors.unwrap_or(d.anchors),
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers.max(1);
    match cli.command {
        Command::TrainBase => {
            let (s, dir) = commands::cmd_train_base(&load(&cli)?, &cli.out)?;
            println!(
                "trained base model on classes {:?} ({} samples), {} anchors, checkpoint sha256 {}",
                s.base_classes, s.samples, s.anchors, s.checkpoint_sha256
            );
            println!("wrote {}", dir.display());
        }
        Command::Run { ref checkpoint, ref anchors } => {
            let base = base_paths(&cli.out, checkpoint.clone(), anchors.clone());
            let (report, dir) = commands::cmd_run(&load(&cli)?, &base, &cli.out, workers)?;
            print!("{}", report.render());
            println!("wrote {}", dir.display());
        }
        Command::Ablate { axis } => {
            let (report, dir) = commands::cmd_ablate(&load(&cli)?, axis, &cli.out, workers)?;
            print!("{}", report.render());
            println!("wrote {}", dir.display());
        }
        Command::AuditInversion { ref checkpoint, ref anchors } => {
            let base = base_paths(&cli.out, checkpoint.clone(), anchors.clone());
            let (report, dir) = commands::cmd_audit_inversion(&load(&cli)?, &base, &cli.out)?;
            print!("{}", commands::render_audit(&report));
            println!("wrote {}", dir.display());
        }
        Command::RenderReport { ref report } => print!("{}", commands::render_report(report)?),
        Command::ShowConfig => print!("{}", load(&cli)?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
