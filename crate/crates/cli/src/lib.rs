//! The `prgflow` command-line tool.
//!
//! Every subcommand reads an optional config file (`--config`), applies
//! `--set section.key=value` overrides and subcommand flags on top, and
//! writes the fully resolved configuration beside its outputs.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "PRGFLOW_THREADS";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

#[derive(Debug, Parser)]
#[command(name = "prgflow", version, about = "Ego-motion estimation experiments on synthetic data")]
struct Cli {
    /// Run configuration file (`key = value` lines under `[section]`s).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Master seed (config key `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export synthetic image pairs and their ground-truth warps.
    GenData {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a cascade of conv regressors.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score estimators on synthetic pairs.
    Bench {
        /// Pairs per warp range (config key `bench.n`).
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated estimator list (config key `bench.estimators`).
        #[arg(long)]
        estimators: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align two images with the phase-correlation baseline.
    FftAlign {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a flight: IMU, altimeter, ground truth and camera frames.
    Simflight {
        #[arg(long)]
        shape: Option<String>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a trajectory from a recorded or simulated flight.
    Fuse {
        /// Directory with imu.csv, alt.csv and frames/.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align an estimated trajectory to ground truth and report errors.
    EvalTraj {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "trajectory")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a compressed student from a teacher network.
    Compress {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// scratch, distill or projection.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the tool and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => EXIT_USAGE,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            EXIT_DATA
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("{THREADS_ENV}=`{v}` is not a thread count")))?,
            Err(_) => return Ok(None),
        },
    };
    if n == 0 {
        return Err(Failure::Usage("thread count must be >= 1".into()));
    }
    Ok(Some(n))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("run", "seed", &seed.to_string())?;
    }
    let path_str = |p: &PathBuf| p.to_string_lossy().into_owned();
    match &cli.command {
        Command::GenData { data: Some(d), .. }
        | Command::Train { data: Some(d), .. }
        | Command::Bench { data: Some(d), .. } => cfg.set("data", "corpus", &path_str(d))?,
        _ => {}
    }
    match &cli.command {
        Command::Train { epochs: Some(e), .. } => cfg.set("train", "epochs", &e.to_string())?,
        Command::Bench { n, estimators, .. } => {
            if let Some(n) = n {
                cfg.set("bench", "n", &n.to_string())?;
            }
            if let Some(e) = estimators {
                cfg.set("bench", "estimators", e)?;
            }
        }
        Command::Simflight { shape, duration, .. } => {
            if let Some(s) = shape {
                cfg.set("sim", "shape", s)?;
            }
            if let Some(d) = duration {
                cfg.set("sim", "duration", &d.to_string())?;
            }
        }
        Command::Fuse { estimator: Some(e), .. } => cfg.set("cascade", "estimator", e)?,
        Command::Compress { teacher, mode, .. } => {
            if let Some(t) = teacher {
                cfg.set("train", "teacher", &path_str(t))?;
            }
            if let Some(m) = mode {
                cfg.set("train", "mode", m)?;
            }
        }
        _ => {}
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads)? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start worker threads: {e}")))?;
    pool.install(|| match &cli.command {
        Command::GenData { n, out, .. } => commands::gen_data(&cfg, *n, out),
        Command::Train { out, .. } => commands::train_cmd(&cfg, out),
        Command::Bench { out, .. } => commands::bench(&cfg, out),
        Command::FftAlign { a, b, out } => commands::fft_align(a, b, out.as_deref(), &cfg),
        Command::Simflight { out, .. } => commands::simflight(&cfg, out),
        Command::Fuse { input, out, .. } => commands::fuse(&cfg, input, out),
        Command::EvalTraj { est, gt, name, out } => commands::eval_traj(&cfg, est, gt, name, out),
        Command::Compress { out, .. } => commands::compress(&cfg, out),
    })
}
