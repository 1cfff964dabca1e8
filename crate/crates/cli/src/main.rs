//! `kseg`: phantom generation, training, robustness sweeps, statistics,
//! feature analysis and figures.

mod commands;
mod config;
mod plot;
mod store;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::SweepKind;
use config::ExperimentConfig;
use kseg::models::ModelVariant;
use kseg::{Error, Result};

#[derive(Parser)]
#[command(name = "kseg", version, about = "Lesion segmentation from k-space on synthetic DCE-MRI phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a config with every default spelled out.
    Init {
        #[arg(long, default_value = "kseg.toml")]
        out: PathBuf,
        /// Channel widths divided by 4 and a short training schedule.
        #[arg(long)]
        desk_scale: bool,
        #[arg(long)]
        force: bool,
    },
    /// Generate the phantom cohort.
    Phantom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant on one cross-validation fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: ModelVariant,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate all four variants of a fold under undersampling or noise.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Paired comparison of two models in a sweep table.
    Stats {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, value_parser = parse_variant, default_value = "hybrid")]
        model_a: ModelVariant,
        #[arg(long, value_parser = parse_variant, default_value = "magnitude")]
        model_b: ModelVariant,
        /// Output directory; defaults to the table's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bootstrap seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Coherent sums and radial profiles of a hybrid checkpoint's bridge.
    Features {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        patient: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// SVG figures from sweep tables and radial profiles.
    Plot {
        #[arg(long)]
        table: Vec<PathBuf>,
        #[arg(long)]
        profiles: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Statistics and figures for every sweep in the output directory.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<ModelVariant, String> {
    ModelVariant::parse(s).map_err(|e| e.to_string())
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Init { out, desk_scale, force } => commands::cmd_init(&out, desk_scale, force),
        Cmd::Phantom { config, seed } => commands::cmd_phantom(&load(&config, seed)?),
        Cmd::Train {
            config,
            variant,
            fold,
            seed,
        } => commands::cmd_train(&load(&config, seed)?, variant, fold),
        Cmd::Sweep {
            config,
            kind,
            fold,
            workers,
            seed,
        } => commands::cmd_sweep(&load(&config, seed)?, kind, fold, workers).map(drop),
        Cmd::Stats {
            table,
            model_a,
            model_b,
            out,
            seed,
        } => {
            let dir = out.unwrap_or_else(|| table.parent().map(PathBuf::from).unwrap_or_default());
            commands::cmd_stats(&table, model_a, model_b, &dir, seed).map(drop)
        }
        Cmd::Features {
            config,
            checkpoint,
            patient,
            out,
            seed,
        } => {
            let cfg = load(&config, seed)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("features"));
            commands::cmd_features(&cfg, &checkpoint, patient, &dir).map(drop)
        }
        Cmd::Plot {
            table,
            profiles,
            out,
            seed,
        } => commands::cmd_plot(&table, &profiles, &out, seed).map(drop),
        Cmd::Report { config, out, seed } => commands::cmd_report(&load(&config, seed)?, out.as_deref()).map(drop),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
