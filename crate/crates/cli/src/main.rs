use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "periscope", version)]
#[command(about = "Metric periocular depth: synthesis, training, calibration and pupil measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic image/depth dataset.
    Synth(SynthArgs),
    /// Render a synthetic frame stream with ground-truth segmentation.
    SynthStream(SynthStreamArgs),
    /// Train the depth network on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Predict depth for an image or every frame of a stream.
    Predict(PredictArgs),
    /// Fit light and noise levels of a scene to a target image.
    Calibrate(CalibrateArgs),
    /// Gate, fuse and measure the pupil over a recorded stream.
    MeasurePupil(MeasureArgs),
    /// Apparent pupil size through the cornea across viewing angles.
    RefractionSim(RefractionArgs),
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct SynthStreamArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fps: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub gaze_sweep_deg: Option<f64>,
    #[arg(long)]
    pub blink_period_s: Option<f64>,
    /// Scene spec JSON for the base frame; the canonical scene otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Epoch history (JSON lines); defaults to `<checkpoint>.history.jsonl`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct PredictArgs {
    #[arg(long, required_unless_present = "stream_dir", conflicts_with = "stream_dir")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub stream_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a grayscale PNG of each depth map.
    #[arg(long)]
    pub png: bool,
}

#[derive(clap::Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub spec0: PathBuf,
    #[arg(long)]
    pub out_trace: PathBuf,
    /// Calibrated spec JSON; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub block_grid: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderArg {
    /// Ground-truth segmentation recomputed from the stream's scene specs.
    Synthetic,
}

#[derive(clap::Args, Debug)]
pub struct MeasureArgs {
    #[arg(long)]
    pub stream_dir: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = ProviderArg::Synthetic)]
    pub provider: ProviderArg,
    /// Report JSON; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Add per-region depth error against the synthetic ground truth.
    #[arg(long)]
    pub with_ground_truth: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long)]
    pub gaze_epsilon_deg: Option<f64>,
    #[arg(long)]
    pub openness_tolerance: Option<f64>,
    #[arg(long, value_parser = ["mad", "two-sigma"])]
    pub outlier_mode: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct RefractionArgs {
    /// start:stop:step in degrees, inclusive.
    #[arg(long, default_value = "0:60:10")]
    pub angles: String,
    #[arg(long, default_value_t = 8.0)]
    pub radius_mm: f64,
    #[arg(long, default_value_t = 2.7)]
    pub chamber_depth_mm: f64,
    #[arg(long, default_value_t = 1.35)]
    pub refractive_index: f64,
    #[arg(long, default_value_t = 4.0)]
    pub diameter_mm: f64,
    /// Emit JSON instead of the text table.
    #[arg(long)]
    pub json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::SynthStream(a) => commands::synth_stream(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::MeasurePupil(a) => commands::measure_pupil(a),
        Command::RefractionSim(a) => commands::refraction_sim(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
