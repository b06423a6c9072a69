use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "evtwin", version, about = "Event-camera simulation, filtering and analysis")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate events from a flux volume.
    Simulate(SimulateArgs),
    /// Denoise an event stream.
    Filter(FilterArgs),
    /// Compute a time surface map.
    Surface(SurfaceArgs),
    /// Reconstruct log-intensity frames from events.
    Reconstruct(ReconstructArgs),
    /// Run an analysis task and emit a CSV table.
    Analyze(AnalyzeArgs),
    /// Convert between event, frame and flux formats.
    Convert(ConvertArgs),
    /// Compare analytic and finite-difference gradients of the relaxed model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// RNG seed; overrides the config file and EVTWIN_SEED.
    #[arg(long)]
    pub seed: Option<u64>,

    #[command(flatten)]
    pub sensor: SensorArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SensorArgs {
    #[arg(long)]
    pub width: Option<u16>,
    #[arg(long)]
    pub height: Option<u16>,
    /// Simulation step in microseconds.
    #[arg(long)]
    pub dt: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub gain: Option<f64>,
    #[arg(long)]
    pub qe: Option<f64>,
    #[arg(long)]
    pub quantum_efficiency: Option<f64>,
    /// Mean ON threshold.
    #[arg(long, allow_negative_numbers = true)]
    pub tpos: Option<f64>,
    /// Mean OFF threshold (negative).
    #[arg(long, allow_negative_numbers = true)]
    pub tneg: Option<f64>,
    /// Threshold standard deviation.
    #[arg(long)]
    pub tsigma: Option<f64>,
    #[arg(long)]
    pub sigma_dark: Option<f64>,
    /// Per-step leak probability.
    #[arg(long, allow_negative_numbers = true)]
    pub leak: Option<f64>,
    /// Refractory period in microseconds.
    #[arg(long)]
    pub refractory: Option<u64>,
    #[arg(long)]
    pub hot_fraction: Option<f64>,
    #[arg(long)]
    pub well_capacity: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shot_noise: Option<bool>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FilterParamArgs {
    #[arg(long)]
    pub baf_dt: Option<u64>,
    #[arg(long)]
    pub baf_radius: Option<u32>,
    #[arg(long)]
    pub ief_t_minus: Option<u64>,
    #[arg(long)]
    pub ief_t_plus: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub ief_agnostic: Option<bool>,
    #[arg(long)]
    pub ynoise_dt: Option<u64>,
    #[arg(long)]
    pub ynoise_radius: Option<u32>,
    #[arg(long)]
    pub coarse_min: Option<u32>,
    #[arg(long)]
    pub hot_max: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Flux volume: a raw .flx file or a directory of PGM frames.
    #[arg(long)]
    pub flux: PathBuf,
    /// Event output (.csv or binary).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-step frame volume output.
    #[arg(long)]
    pub frames: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterMethod {
    Polarity,
    Baf,
    Ief,
    Ynoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Keep {
    Positive,
    Negative,
    Both,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: FilterMethod,
    /// Polarities kept by the polarity method.
    #[arg(long, value_enum, default_value = "both")]
    pub keep: Keep,
    #[command(flatten)]
    pub params: FilterParamArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SurfaceKind {
    Exponential,
    Count,
    Average,
    AverageAbs,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "exponential")]
    pub mode: SurfaceKind,
    /// Evaluation time in microseconds; defaults to the last event.
    #[arg(long)]
    pub t_eval: Option<u64>,
    /// Decay constant in microseconds.
    #[arg(long, default_value_t = 10_000.0)]
    pub tau: f64,
    /// Ignore polarity.
    #[arg(long)]
    pub agnostic: bool,
    /// Sub-window as x0,y0,width,height.
    #[arg(long, value_delimiter = ',')]
    pub window: Option<Vec<u16>>,
    /// CSV output; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SmoothingKind {
    None,
    Gaussian,
    Bilateral,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    /// Directory receiving frame_NNNNN.csv and times.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Decay rate in 1/us.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Fixed frame interval in microseconds; one frame per event when omitted.
    #[arg(long)]
    pub interval: Option<u64>,
    #[arg(long, value_enum, default_value = "none")]
    pub smoothing: SmoothingKind,
    /// Gaussian sigma in pixels.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Sensitivity,
    Falarm,
    Latency,
    Detection,
    Roc,
    Aucgrid,
    Optimum,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Previous flux for the sensitivity task.
    #[arg(long, allow_negative_numbers = true)]
    pub phi: Option<f64>,
    /// Uniform background in photons.
    #[arg(long, default_value_t = 1000.0, allow_negative_numbers = true)]
    pub background: f64,
    /// Background levels averaged by aucgrid and optimum.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub backgrounds: Option<Vec<f64>>,
    /// Background from a time-of-day label of the example profile.
    #[arg(long)]
    pub time_of_day: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub impulse: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub impulses: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub thresholds: Option<Vec<f64>>,
    /// Refractory periods for the latency task, in microseconds.
    #[arg(long, value_delimiter = ',')]
    pub refractories: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// CSV output; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameKind {
    Polarity,
    Count,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[command(flatten)]
    pub common: Common,
    /// Events (.csv or binary), frames (.frm) or flux (.flx or PGM directory).
    #[arg(long)]
    pub input: PathBuf,
    /// Output; the format follows the extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of frame bins over the stream's time extent.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Frame bin width in microseconds, starting at --t0.
    #[arg(long)]
    pub dt_bin: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub t0: u64,
    #[arg(long, value_enum, default_value = "polarity")]
    pub frame_mode: FrameKind,
    /// Write events as a colored point cloud CSV.
    #[arg(long)]
    pub cloud: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Flux volume; a smooth synthetic sequence when omitted.
    #[arg(long)]
    pub flux: Option<PathBuf>,
    /// Frames in the synthetic sequence.
    #[arg(long, default_value_t = 5)]
    pub n_frames: usize,
    #[arg(long)]
    pub steepness: Option<f64>,
    /// Maximum relative error per parameter group.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Report output; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
