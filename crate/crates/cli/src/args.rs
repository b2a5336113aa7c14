use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reach_core::pipeline::TuneOnset;
use reach_core::reduce::Variant;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "reach", version, about = "Reaching-motion prediction: synthesis, training, evaluation and live serving")]
pub struct Cli {
    /// More log output (-v info, -vv debug, -vvv trace). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic session CSV and its truth sidecar.
    Synth(SynthArgs),
    /// Offline two-stage segmentation of a session.
    Segment(SegmentArgs),
    /// Train a model bundle (HMM, reducer, mixtures, thresholds, FSM).
    Train(TrainArgs),
    /// Tune the stopping thresholds and write the accuracy/time frontier.
    Tune(TuneArgs),
    /// Cross-validated accuracy curves for every reducer variant.
    Eval(EvalArgs),
    /// Stream a session through a bundle and judge the controller.
    Replay(ReplayArgs),
    /// Serve bundles over WebSocket.
    Serve(ServeArgs),
    /// Sweep the synthetic noise scale against FDA accuracy at 30%.
    Calibrate(CalibrateArgs),
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: reach_core::Error| e.to_string())
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetArg {
    Live,
    Segmented,
}

impl From<OnsetArg> for TuneOnset {
    fn from(o: OnsetArg) -> Self {
        match o {
            OnsetArg::Live => TuneOnset::Live,
            OnsetArg::Segmented => TuneOnset::Segmented,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Number of reach directions (4 or 8).
    #[arg(long, default_value_t = 4)]
    pub directions: usize,
    /// Repetitions per direction.
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Multiplier on the reference noise profile.
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    /// No noise at all (overrides --noise-scale).
    #[arg(long)]
    pub noiseless: bool,
    /// Inject wrist-rotation blips into every Nth home rest.
    #[arg(long, value_name = "N")]
    pub blips: Option<usize>,
    /// Peak angular rate of each blip, rad/s.
    #[arg(long, default_value_t = 1.0, requires = "blips")]
    pub blip_peak: f64,
    /// Session CSV to write; the truth goes next to it as .truth.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SegmentArgs {
    #[arg(long)]
    pub session: PathBuf,
    /// Interval CSV: start,end,state,motion_role,direction.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub session: PathBuf,
    /// pca, pcanmf, fda or fda-imu.
    #[arg(long, default_value = "fda", value_parser = parse_variant)]
    pub variant: Variant,
    /// Accuracy the threshold search must reach on held-out folds.
    #[arg(long, default_value_t = 0.95)]
    pub target_acc: f64,
    /// Where held-out evidence starts: the causal HMM onset or the offline one.
    #[arg(long, value_enum, default_value_t = OnsetArg::Live)]
    pub tune_onset: OnsetArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Bundle JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the threshold frontier CSV.
    #[arg(long)]
    pub frontier: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TuneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Selected stopping configuration, JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Frontier CSV: th_r,th_s,mean_acc,std_acc,mean_time_s,mean_pct_trajectory,abort_rate.
    #[arg(long)]
    pub frontier: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Sessions to evaluate; defaults to the seed-42 reference sessions with 4 and 8 directions.
    #[arg(long)]
    pub session: Vec<PathBuf>,
    /// Variants to evaluate (default: all four).
    #[arg(long, value_parser = parse_variant, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Accuracy target for the stopping summary.
    #[arg(long, default_value_t = 0.95)]
    pub target_acc: f64,
    /// Curve table CSV: session,n_classes,variant,percent,mean_acc,std_acc.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub session: PathBuf,
    /// Real-time pacing factor; 0 replays as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    pub speed: f64,
    /// Events, one JSON object per line.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Transition log, one line per FSM transition.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Metrics and latency JSON.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Keep going after an erroneous transition instead of resetting at home.
    #[arg(long)]
    pub no_reset: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct ServeArgs {
    /// Bundle to offer, as NAME=PATH or just PATH (named after the file stem). Repeatable.
    #[arg(long = "bundle", required = true)]
    pub bundles: Vec<String>,
    /// Bundle new sessions start with; defaults to the first one.
    #[arg(long)]
    pub default: Option<String>,
    #[arg(long, default_value = "127.0.0.1:8765")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 1000)]
    pub heartbeat_ms: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = 4)]
    pub directions: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Noise scales to try.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,1,1.25,1.5")]
    pub scales: Vec<f64>,
    /// FDA accuracy at 30% the sweep aims for.
    #[arg(long, default_value_t = 0.92)]
    pub target_acc30: f64,
    /// Optional CSV: scale,acc30,acc80.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
