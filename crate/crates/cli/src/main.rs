//! `roibin` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 I/O. Diagnostics go to
//! stderr; data, tables and reports go to stdout or the named files.

mod commands;
mod failure;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, ArgGroup, Args, Parser, Subcommand, ValueEnum};

use roibin::bench::Noise;
use roibin::frames::Dims4;

use crate::settings::Layer;

#[derive(Debug, Parser)]
#[command(
    name = "roibin",
    version,
    about = "ROI-preserving binning and error-bounded compression of detector frames",
    after_help = "Exit codes: 0 success, 2 usage error, 3 data error, 4 I/O error.\n\
                  Settings precedence: flags > --config file > ROIBIN_* environment > defaults."
)]
struct Cli {
    /// More diagnostics on stderr (repeat for more)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress raw frames (or recompress a container)
    Compress(CompressArgs),
    /// Decode a container to little-endian float32 frames
    Decompress(DecompressArgs),
    /// Search thread allocations and store the result in a tune cache
    Tune(TuneArgs),
    /// Measure compression and decompression throughput
    Bench(BenchArgs),
    /// Compression ratio over binning, tolerance and predictor dims
    Grid(GridArgs),
    /// Quality metrics between two intensity files
    Metrics(MetricsArgs),
    /// Write seeded synthetic frames
    Synth(SynthArgs),
}

pub fn parse_dims(s: &str) -> Result<Dims4, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected E,P,R,C, got '{s}'"))?;
    match v[..] {
        [e, p, r, c] => Dims4::new(e, p, r, c).map_err(|e| e.to_string()),
        _ => Err(format!("expected four comma-separated sizes, got '{s}'")),
    }
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got '{s}'"))?;
    let p = |x: &str| x.trim().parse::<T>().map_err(|_| format!("bad number in '{s}'"));
    Ok((p(a)?, p(b)?))
}

#[derive(Debug, Clone, Args)]
pub struct FrameArgs {
    /// Headerless little-endian uint16 frames
    #[arg(long, value_name = "FILE", requires = "dims")]
    pub input: Option<PathBuf>,
    /// Frame geometry: events,panels,rows,cols
    #[arg(long, value_name = "E,P,R,C", value_parser = parse_dims)]
    pub dims: Option<Dims4>,
    /// Per-pixel float32 pedestal for one event
    #[arg(long, value_name = "FILE", requires = "gain")]
    pub pedestal: Option<PathBuf>,
    /// Per-pixel float32 gain for one event
    #[arg(long, value_name = "FILE", requires = "pedestal")]
    pub gain: Option<PathBuf>,
    /// Peak list CSV; peaks are found when absent
    #[arg(long, value_name = "FILE")]
    pub peaks: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// TOML configuration file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub layer: Layer,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "container"])))]
pub struct CompressArgs {
    #[command(flatten)]
    pub frames: FrameArgs,
    /// Existing container to recompress
    #[arg(long, value_name = "FILE", conflicts_with_all = ["input", "pedestal", "gain"])]
    pub container: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Use the thread allocation stored by `tune` when it matches
    #[arg(long, value_name = "FILE")]
    pub tune_cache: Option<PathBuf>,
    /// Container output path
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// JSON report path (stdout when absent)
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    /// Container to decode
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// float32 output path
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Decode a single event
    #[arg(long, value_name = "K")]
    pub event: Option<usize>,
    /// Chunks decoded concurrently
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub threads: usize,
    /// Also write the stored peak table as CSV
    #[arg(long, value_name = "FILE")]
    pub peaks_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub frames: FrameArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Tune cache JSON to read and update
    #[arg(long, value_name = "FILE")]
    pub tune_cache: PathBuf,
    /// Evaluation budget (default grows with the square root of the space)
    #[arg(long, value_name = "N")]
    pub budget: Option<usize>,
    /// Timed repetitions per evaluation
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent tuning runs; the modal allocation wins
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub runs: usize,
    /// Upper bound of the task axis (default: chunk count, at most 40)
    #[arg(long, value_name = "N")]
    pub max_tasks: Option<usize>,
    /// Upper bound of the per-stage thread axes
    #[arg(long, value_name = "N", default_value_t = 8)]
    pub max_threads: usize,
    /// Re-tune even when the cache matches
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseArg {
    Gaussian,
    Uniform,
}

impl From<NoiseArg> for Noise {
    fn from(n: NoiseArg) -> Noise {
        match n {
            NoiseArg::Gaussian => Noise::Gaussian,
            NoiseArg::Uniform => Noise::Uniform,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthParamArgs {
    /// Spots per event
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair::<usize>, default_value = "10,30")]
    pub peaks_per_event: (usize, usize),
    /// Spot amplitude above background (ADU)
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair::<f32>, default_value = "500,5000")]
    pub amplitude: (f32, f32),
    /// Spot width in pixels
    #[arg(long, default_value_t = 1.5)]
    pub sigma: f32,
    /// Mean background level (ADU)
    #[arg(long, default_value_t = 20.0)]
    pub background: f32,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub noise: NoiseArg,
    /// Minimum spot separation in pixels
    #[arg(long, default_value_t = 34)]
    pub separation: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TableFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub frames: FrameArgs,
    #[command(flatten)]
    pub synth: SynthParamArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Timed repetitions per configuration
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub reps: usize,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: TableFormat,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub frames: FrameArgs,
    #[command(flatten)]
    pub synth: SynthParamArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Every combination instead of one sweep per axis
    #[arg(long)]
    pub full: bool,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: TableFormat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// First intensity file (one value per line, optional header)
    pub first: PathBuf,
    /// Second intensity file
    pub second: PathBuf,
    /// Rsplit scale factor, or `auto` for the least-squares fit
    #[arg(long, default_value = "auto")]
    pub scale: String,
    #[arg(long, value_enum, default_value = "table")]
    pub format: MetricFormat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SampleFormat {
    U16,
    F32,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Frame geometry: events,panels,rows,cols
    #[arg(long, value_name = "E,P,R,C", value_parser = parse_dims)]
    pub dims: Dims4,
    #[command(flatten)]
    pub synth: SynthParamArgs,
    /// Frame output path
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Planted spot centres as CSV
    #[arg(long, value_name = "FILE")]
    pub peaks_out: Option<PathBuf>,
    /// u16 rounds and clamps to the detector range
    #[arg(long, value_enum, default_value = "u16")]
    pub format: SampleFormat,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Compress(a) => commands::compress(a),
        Command::Decompress(a) => commands::decompress(a),
        Command::Tune(a) => commands::tune(a),
        Command::Bench(a) => commands::bench(a),
        Command::Grid(a) => commands::grid(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("roibin: error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
