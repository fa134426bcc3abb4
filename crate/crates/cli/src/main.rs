//! `kdlab`: run supervision-complexity and distillation experiments from TOML configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use kdlab::harness::{self, ExperimentConfig, Recipe, RunReport};

#[derive(Parser, Debug)]
#[command(name = "kdlab", version, about = "Supervision complexity and knowledge distillation laboratory")]
struct Cli {
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the recipe named in the config.
    Run { config: PathBuf },
    /// Train the teacher and save its checkpoints, metrics and datasets.
    TrainTeacher { config: PathBuf },
    /// Run the complexity_curve recipe on the config.
    Complexity { config: PathBuf },
    /// Run the ntk_similarity recipe on the config.
    NtkSim { config: PathBuf },
    /// Run the bound_check recipe on the config.
    Bound { config: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILURE: u8 = 1;

/// Error carrying the exit code it should produce.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<kdlab::Error> for Failure {
    fn from(e: kdlab::Error) -> Self {
        let code = if e.is_config_error() { EXIT_CONFIG } else { EXIT_FAILURE };
        Failure { code, error: e.into() }
    }
}

fn load_config(path: &Path, cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(|error| Failure { code: EXIT_CONFIG, error })?;
    let mut cfg = harness::parse_config(&text).map_err(|e| Failure {
        code: EXIT_CONFIG,
        error: anyhow::Error::new(e).context(format!("in config {}", path.display())),
    })?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("kdlab-out"))
}

fn finish(report: &RunReport, dir: &Path) -> Result<(), Failure> {
    harness::emit(report, dir)?;
    println!("{} -> {}", report.recipe.name(), dir.display());
    for (k, v) in &report.summary {
        println!("  {k} = {v}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure {
                code: EXIT_CONFIG,
                error: anyhow::anyhow!("--threads must be at least 1"),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")
            .map_err(|error| Failure { code: EXIT_FAILURE, error })?;
    }
    let (path, forced) = match &cli.command {
        Command::Run { config } => (config, None),
        Command::TrainTeacher { config } => (config, None),
        Command::Complexity { config } => (config, Some(Recipe::ComplexityCurve)),
        Command::NtkSim { config } => (config, Some(Recipe::NtkSimilarity)),
        Command::Bound { config } => (config, Some(Recipe::BoundCheck)),
    };
    let mut cfg = load_config(path, cli)?;
    if let Some(r) = forced {
        cfg.recipe = r;
    }
    let dir = out_dir(&cfg);
    log::info!("{} with seed {} into {}", cfg.recipe.name(), cfg.seed, dir.display());
    let report = match cli.command {
        Command::TrainTeacher { .. } => harness::train_teacher_artifacts(&cfg, &dir)?,
        _ => harness::run_recipe(&cfg)?,
    };
    finish(&report, &dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
