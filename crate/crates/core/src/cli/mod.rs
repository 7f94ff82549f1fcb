//! The `nanonas` command line: every pipeline stage as a subcommand that
//! writes its artifacts and a replayable manifest into an output directory.

mod config;
mod jobs;
mod report;

use std::ffi::OsString;
use std::io::ErrorKind;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{DataConfig, DeployConfig, ModelConfig, RunConfig, SearchSection, SimulateConfig};
pub use jobs::{
    envelope, execute, read_envelope, replay, EpisodeSummary, EstimatorChoice, FileHash, Job, ReplayOutcome,
    RunManifest, Seeds, SimSummary, TrainSummary, ARTIFACT_SCHEMA_VERSION, MANIFEST_FILE,
};
pub use report::{build_report, sweep_table, FrontRow, Report, SweepTable};

use crate::error::Error;

#[derive(Debug, Parser)]
#[command(name = "nanonas", version, about = "Channel search, int8 deployment and closed-loop tests for pose CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration. Missing keys take their defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory for the artifacts and manifest.json.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct EstimatorArgs {
    /// Float checkpoint or `.qgraph` integer graph.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Ground-truth poses.
    #[arg(long)]
    pub oracle: bool,
    /// Constant training-set mean.
    #[arg(long)]
    pub trivial: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the seed network.
    Train(RunArgs),
    /// Search one lambda and train the extracted network.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        lambda: f64,
    },
    /// Search every lambda of `search.lambdas`; writes sweep.csv.
    Sweep(RunArgs),
    /// Fake-quantize a float checkpoint and export the integer graph.
    Quantize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Memory fit, tiling plan and cycle/power estimate.
    Plan {
        #[command(flatten)]
        run: RunArgs,
        /// `.qgraph`, architecture `.json` or checkpoint.
        #[arg(long)]
        input: PathBuf,
    },
    /// Closed-loop tracking episodes, one per `simulate.seeds` entry.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Consolidated tables for a run directory.
    Report {
        #[command(flatten)]
        run: RunArgs,
        /// Run directory to summarize.
        #[arg(long)]
        from: PathBuf,
    },
    /// Re-run a manifest single-threaded and compare artifact hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    Config {
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// 1 for bad inputs (schemas, configs, missing files), 2 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(io) if io.kind() == ErrorKind::NotFound => EXIT_VALIDATION,
        e if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn run_job(args: &RunArgs, job: Job) -> crate::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let m = execute(&job, &cfg, &args.out)?;
    println!("{}: {} artifacts in {}", job.name(), m.artifacts.len(), args.out.display());
    for a in &m.artifacts {
        println!("  {}  {}", a.sha256, a.path);
    }
    Ok(())
}

/// Returns the failure's exit code alongside the error so callers can report
/// it before exiting.
pub fn run(cli: Cli) -> Result<(), (i32, Error)> {
    let fail = |e: Error| (exit_code(&e), e);
    match cli.command {
        Command::Train(a) => run_job(&a, Job::Train),
        Command::Search { run, lambda } => run_job(&run, Job::Search { lambda }),
        Command::Sweep(a) => run_job(&a, Job::Sweep),
        Command::Quantize { run, model } => run_job(&run, Job::Quantize { model }),
        Command::Plan { run, input } => run_job(&run, Job::Plan { input }),
        Command::Simulate { run, estimator } => {
            let choice = match (estimator.model, estimator.oracle) {
                (Some(path), _) => EstimatorChoice::Model { path },
                (None, true) => EstimatorChoice::Oracle,
                _ => EstimatorChoice::Trivial,
            };
            run_job(&run, Job::Simulate { estimator: choice })
        }
        Command::Report { run, from } => {
            run_job(&run, Job::Report { run: from }).map_err(fail)?;
            if let Ok(t) = std::fs::read_to_string(run.out.join("report.txt")) {
                print!("{t}");
            }
            Ok(())
        }
        Command::Replay { manifest, out } => {
            let r = replay(&manifest, &out).map_err(fail)?;
            if !r.identical() {
                return Err((
                    EXIT_RUNTIME,
                    Error::Format(format!("replay differs in {}", r.mismatched.join(", "))),
                ));
            }
            println!("replay identical: {} artifacts", r.manifest.artifacts.len());
            Ok(())
        }
        Command::Config { config, set } => RunConfig::load(config.as_deref(), &set)
            .and_then(|c| c.to_toml())
            .map(|t| print!("{t}")),
    }
    .map_err(fail)
}

/// Entry point of the binary. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err((code, e)) => {
            eprintln!("error: {e}");
            code
        }
    }
}
