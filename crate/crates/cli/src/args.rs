use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "roadnet", version, about = "RoadNet-RT inference, graph transforms, and accelerator cost model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter/MAC report, lane-alignment warnings, separable comparison.
    Info(InfoArgs),
    /// Large-kernel, dilated, depthwise-separable, then batch-norm folding.
    Transform(TransformArgs),
    /// Calibrate activation formats and write a fixed-point container.
    Quantize(QuantizeArgs),
    /// Segment images; writes a mask and an overlay per image.
    Run(RunArgs),
    /// Score predictions against ground-truth masks.
    Eval(EvalArgs),
    /// Cycle, throughput, and resource estimate.
    Estimate(EstimateArgs),
    /// Seeded equivalence checks of the fixed-point datapath.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    Float32,
    Int8,
    Int16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IntPrecision {
    Int8,
    Int16,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Graph document; defaults to the reference network.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Weight container; defaults to seeded random weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub lanes: usize,
    /// Emit JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "int8")]
    pub precision: IntPrecision,
    /// Directory of PPM calibration images; seeded synthetic images otherwise.
    #[arg(long)]
    pub calib_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub calib_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "float32")]
    pub precision: Precision,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub calib_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// PPM images.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "float32")]
    pub precision: Precision,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub calib_dir: Option<PathBuf>,
    /// Dataset directory holding `images/<name>.ppm` and `gt/<name>.pgm`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Graph document; defaults to the transformed reference network.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "int8")]
    pub precision: IntPrecision,
    #[arg(long)]
    pub clock_hz: Option<u64>,
    #[arg(long)]
    pub buffers: Option<usize>,
    #[arg(long)]
    pub bus_bytes: Option<u64>,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random layer instances checked against the direct oracle.
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
}
