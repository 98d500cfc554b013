use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mbkd::experiment::{
    evaluate_checkpoint, export_metrics, run_ablation, run_experiment, ExperimentConfig, ExportFormat,
    RunOptions,
};

#[derive(Parser)]
#[command(name = "mbkd", version, about = "Multi-branch online knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the init and shuffle seeds.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Replace the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(seed) = self.seed_override {
            config.override_seed(seed);
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Continue from a checkpoint written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a full or leader checkpoint on the config's test split.
    Evaluate {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the mechanism × CD matrix and print the comparison table.
    Ablate {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Export a run's metrics as csv or json.
    Export {
        run_dir: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { args, resume } => {
            let config = args.load()?;
            let summary = run_experiment(&config, &RunOptions { resume })?;
            println!(
                "{}",
                serde_json::json!({
                    "run_dir": summary.run_dir,
                    "config_hash": summary.config_hash,
                    "epochs": summary.records.len(),
                    "final": summary.final_eval,
                })
            );
        }
        Command::Evaluate { args, checkpoint } => {
            let config = args.load()?;
            let report = evaluate_checkpoint(&config, &checkpoint)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Ablate { args } => {
            let config = args.load()?;
            let table = run_ablation(&config)?;
            print!("{}", table.to_markdown());
        }
        Command::Export { run_dir, format } => {
            let format: ExportFormat = format.parse()?;
            let path = export_metrics(&run_dir, format)?;
            println!("{}", path.display());
        }
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
