//! `ceutrack` command-line front end.
//!
//! Every subcommand parses its inputs, makes one library call and writes the
//! result. Exit codes: 0 success, 1 usage error, 2 data error, 3 internal
//! invariant violation.

pub mod commands;
pub mod seqdir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ceutrack_core::config::RunConfig;
use ceutrack_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// A check the tool runs on itself failed.
    Internal(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::InvalidArgument(_)) => EXIT_USAGE,
            CliError::Core(e) if e.is_data_error() => EXIT_DATA,
            CliError::Core(_) | CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "ceutrack",
    version,
    about = "Color-event single-object tracking toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores, 1 = serial).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the effective configuration to this file.
    #[arg(long, global = true)]
    pub dump_config: Option<PathBuf>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Event file conversion and windowing.
    #[command(subcommand)]
    Events(EventsCommand),
    /// Voxel tensors for every frame interval of a sequence.
    Voxelize(VoxelizeArgs),
    /// Dense event images.
    Render(RenderArgs),
    /// Track a sequence with a toy model.
    Track(TrackArgs),
    /// SR/PR/NPR curves, attribute breakdown and optional BOC.
    Eval(EvalArgs),
    /// Generate a synthetic color-event sequence.
    Synth(SynthArgs),
    /// Run the built-in gradient and oracle suites.
    Selftest(SelftestArgs),
    /// Parse + voxelize throughput.
    Bench(BenchArgs),
    /// Write seeded toy model parameters.
    InitParams(InitParamsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Bin,
}

#[derive(Debug, Args)]
pub struct EventIoArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub from: Option<FormatArg>,
    /// Output format; inferred from the extension when omitted.
    #[arg(long)]
    pub to: Option<FormatArg>,
    /// Sensor size as WxH.
    #[arg(long)]
    pub sensor: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum EventsCommand {
    Convert(EventIoArgs),
    Slice {
        #[command(flatten)]
        io: EventIoArgs,
        #[arg(long)]
        t0: u64,
        #[arg(long)]
        t1: u64,
    },
}

#[derive(Debug, Args)]
pub struct VoxelizeArgs {
    #[arg(long)]
    pub seq: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderMode {
    Frame,
    Timesurface,
    Blend,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub mode: RenderMode,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub from: Option<FormatArg>,
    #[arg(long)]
    pub sensor: Option<String>,
    /// Window start; defaults to the first event.
    #[arg(long)]
    pub t0: Option<u64>,
    /// Window end (exclusive); defaults to one past the last event.
    #[arg(long)]
    pub t1: Option<u64>,
    /// Color frame (PPM/PGM) for blend mode.
    #[arg(long)]
    pub color: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub seq: PathBuf,
    /// Parameter container; a seeded toy model is used when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Initial box as x,y,w,h; defaults to the first ground-truth box.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<video>.txt` result files.
    #[arg(long)]
    pub results: PathBuf,
    /// Directory of `<video>.txt` annotation files.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    /// Baseline SR table; BOC is omitted without one.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Only evaluate videos carrying this attribute tag.
    #[arg(long)]
    pub attribute: Option<String>,
    #[arg(long)]
    pub out_json: PathBuf,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Perturb the gradient-suite model weights by up to this amount.
    #[arg(long)]
    pub perturb: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub from: Option<FormatArg>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// Write the top-k voxel tensor of the whole stream here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitParamsArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Uniform weight noise added after initialization.
    #[arg(long)]
    pub perturb: Option<f64>,
}

/// Config file, then `--set` overrides, then dedicated flags.
pub fn effective_config(global: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::parse(&seqdir::read_text(path)?)?,
        None => RunConfig::default(),
    };
    for o in &global.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = global.threads {
        cfg.threads = threads;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = effective_config(&cli.global)?;
    if let Some(path) = &cli.global.dump_config {
        seqdir::write_file(path, cfg.dump())?;
    }
    let dispatch = || commands::dispatch(&cli.command, &cfg);
    if cfg.threads == 0 {
        return dispatch();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    pool.install(dispatch)
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("ceutrack: {e}");
            e.exit_code()
        }
    }
}
