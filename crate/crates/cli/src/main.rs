use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fastattrib_cli::{exit, exit_code, logging, Outcome, Pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "fastattrib",
    version,
    about = "Distill unlearning-based data attribution into a feature embedding"
)]
struct Cli {
    /// key = value run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding artifacts, stamps and metrics.
    #[arg(long, global = true, env = "FASTATTRIB_RUN_DIR", default_value = "run")]
    run_dir: PathBuf,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for stage-internal parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log debug messages too.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    MakeData,
    TrainModel,
    GenQueries,
    FitEncoder,
    FitFisher,
    Curate,
    TrainRanker,
    EvalRank,
    EvalCounterfactual,
    Bench,
    Report,
    /// Every stage in dependency order.
    Run,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        let one = match self {
            Command::MakeData => Stage::MakeData,
            Command::TrainModel => Stage::TrainModel,
            Command::GenQueries => Stage::GenQueries,
            Command::FitEncoder => Stage::FitEncoder,
            Command::FitFisher => Stage::FitFisher,
            Command::Curate => Stage::Curate,
            Command::TrainRanker => Stage::TrainRanker,
            Command::EvalRank => Stage::EvalRank,
            Command::EvalCounterfactual => Stage::EvalCounterfactual,
            Command::Bench => Stage::Bench,
            Command::Report => Stage::Report,
            Command::Run => return Stage::ALL.to_vec(),
        };
        vec![one]
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG as u8 } else { 0 });
        }
    };
    logging::init(if cli.verbose {
        log::Level::Debug
    } else {
        log::Level::Info
    });
    let mut cfg = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match RunConfig::parse(&text) {
                Ok(c) => c,
                Err(e) => {
                    log::error!("{}: {e}", path.display());
                    return ExitCode::from(exit::CONFIG as u8);
                }
            },
            Err(e) => {
                log::error!("cannot read {}: {e}", path.display());
                return ExitCode::from(exit::CONFIG as u8);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::error!("cannot size the thread pool: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    }
    let pipeline = match Pipeline::new(cfg, &cli.run_dir) {
        Ok(p) => p,
        Err(e) => {
            log::error!("{e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    for stage in cli.command.stages() {
        match pipeline.run_stage(stage) {
            Ok(Outcome::UpToDate) => println!("{}: up to date", stage.name()),
            Ok(Outcome::Ran) => println!("{}: done", stage.name()),
            Err(e) => {
                log::error!("{}: {e}", stage.name());
                return ExitCode::from(exit_code(&e) as u8);
            }
        }
    }
    ExitCode::from(exit::OK as u8)
}
