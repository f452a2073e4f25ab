use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcomm_core::config::DatasetSource;
use fedcomm_core::{Error, ErrorKind, Experiment, ExperimentConfig, Stage};

/// Community-based federated anomaly detection experiments.
#[derive(Debug, Parser)]
#[command(name = "fedcomm", version)]
struct Cli {
    /// TOML experiment configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Average-pooling factor for IDX images (1, 2 or 4).
    #[arg(long, global = true)]
    pool: Option<usize>,
    /// Clients per inlier class, comma separated (e.g. `9,18,27,36`).
    #[arg(long = "p", global = true, value_delimiter = ',')]
    p: Option<Vec<usize>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage for every p and write the reports.
    Full,
    /// Run one stage from the artifacts already in the output directory.
    Stage {
        /// partition, phase1, communities, train or evaluate
        name: String,
    },
    /// Print the effective configuration with all defaults filled in.
    PrintConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &cli.p {
        cfg.p = p.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(factor) = cli.pool {
        match &mut cfg.dataset {
            DatasetSource::Idx { pool, .. } => *pool = factor,
            DatasetSource::Synthetic { .. } => {
                return Err(Error::Config(
                    "--pool applies only to an idx dataset".into(),
                ))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = effective_config(cli)?;
    if let Command::PrintConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    let experiment = Experiment::new(cfg, &out)?;
    match &cli.command {
        Command::Full => {
            let report = experiment.run_full()?;
            for row in report.summary() {
                println!(
                    "p={} {:<9} {:.4} ± {:.4}",
                    row.p, row.scheme, row.mean, row.std
                );
            }
            println!("reports written to {}", out.display());
        }
        Command::Stage { name } => {
            let stage: Stage = name.parse()?;
            experiment.run_stage(stage)?;
        }
        Command::PrintConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
