//! Command-line front end for data generation, training, evaluation and
//! density estimation on the four benchmark problems.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use vbdo_core::problems::Problem;
use vbdo_core::Error;

pub use config::{RunConfig, RunPaths};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(..) => EXIT_IO,
            CliError::Core(e) => match e {
                Error::TrainingDivergence { .. }
                | Error::SolverDivergence { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Numeric(_)
                | Error::DegenerateFeature { .. }
                | Error::DegenerateTarget
                | Error::SingleSpike { .. }
                | Error::ZeroNormTruth => EXIT_DIVERGENCE,
                Error::Io { .. } | Error::Format(_) | Error::Version { .. } | Error::Checksum { .. } => EXIT_IO,
                _ => EXIT_USAGE,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Ad,
    Pendulum,
    Dr,
    Advd,
}

impl From<Preset> for Problem {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Ad => Problem::Ad,
            Preset::Pendulum => Problem::Pendulum,
            Preset::Dr => Problem::Dr,
            Preset::Advd => Problem::Advd,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vbdo", version, about = "Variational-Bayes DeepONet toolkit")]
pub struct Cli {
    /// TOML run configuration; defaults to <out>/config.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Benchmark preset; overrides the config's `problem`.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (falls back to VBDO_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Run directory for datasets, checkpoints and reports.
    #[arg(long, global = true, default_value = "vbdo-run")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample inputs, solve the benchmark and write train/test datasets.
    GenData,
    /// Train from scratch.
    Train {
        /// Train the deterministic baseline instead of the variational model.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Continue training from the saved checkpoint.
    Resume {
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        epochs: u64,
    },
    /// Score the checkpoint on the test set.
    Evaluate {
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        samples: Option<usize>,
        /// Score the ground truth against itself (pipeline sanity check).
        #[arg(long)]
        oracle: bool,
    },
    /// Predict on the evaluation grid for given inputs.
    Predict {
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        samples: Option<usize>,
        /// CSV of branch inputs, one realization per line; defaults to the test inputs.
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Predictive density of the solution at one grid location.
    Pdf {
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        samples: Option<usize>,
        /// 1-based time index.
        #[arg(long)]
        t_index: usize,
        /// 1-based space index (PDE problems).
        #[arg(long)]
        x_index: Option<usize>,
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Side-by-side NMSE and coverage of the variational model and the baseline.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Resume { .. } => "resume",
            Command::Evaluate { .. } => "evaluate",
            Command::Predict { .. } => "predict",
            Command::Pdf { .. } => "pdf",
            Command::Report => "report",
        }
    }
}

fn thread_count(cli: &Cli) -> Result<Option<usize>, CliError> {
    let n = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("VBDO_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("VBDO_THREADS='{v}' is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(CliError::Usage("thread count must be positive".into()));
    }
    Ok(n)
}

/// Resolves the configuration for one invocation.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let preset = cli.preset.map(Problem::from);
    let default_path = RunPaths::new(&cli.out).config();
    // gen-data starts a run, so it never inherits a previous run's config.
    let inherit = !matches!(cli.command, Command::GenData) && default_path.exists();
    let path = cli.config.clone().or_else(|| inherit.then_some(default_path));
    let mut cfg = match (path, preset) {
        (Some(p), _) => RunConfig::load(&p, preset)?,
        (None, Some(p)) => RunConfig::preset(p),
        (None, None) => return Err(CliError::Usage("pass --config or --preset".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    cfg.resolve();
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let paths = RunPaths::new(&cli.out);
    let work = || commands::dispatch(&cli.command, &cfg, &paths);
    match thread_count(cli)? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
