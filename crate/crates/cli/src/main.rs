use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod overlay;

/// Zero-shot grid detector: data generation, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "zsdet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset and write its manifest.
    GenData(GenDataArgs),
    /// Route the scenes of a manifest into train/test partitions.
    Split(SplitArgs),
    /// Build a prototype table from a manifest's classes.
    Prototypes(PrototypesArgs),
    /// Train a detector on the training partition of a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on the test partitions.
    Eval(EvalArgs),
    /// Write detections for one partition or a single image.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory; receives `manifest.json` and `images/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    #[arg(long, default_value_t = 1000)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 112)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_objects: usize,
    /// Comma-separated unseen class ids. When given, scenes are drawn from
    /// seen-only, unseen-only and mixed pools (80/15/5) and routed at once.
    #[arg(long, value_delimiter = ',')]
    pub unseen: Vec<u32>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the routed manifest; images are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated unseen class ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "energy")]
    pub unseen: Vec<u32>,
    /// Pick the split whose energy score is closest to this value.
    #[arg(long)]
    pub energy: Option<f64>,
    #[arg(long, default_value_t = 6)]
    pub n_unseen: usize,
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PrototypesArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ProtoMode::Attributes)]
    pub mode: ProtoMode,
    #[arg(long, default_value_t = zsdet::prototypes::DEFAULT_RANDOM_SEED)]
    pub seed: u64,
    /// Dimension of random prototypes (defaults to the attribute count).
    #[arg(long)]
    pub random_dim: Option<usize>,
    /// Reduced dimension for w2vR.
    #[arg(long, default_value_t = 8)]
    pub target_dim: usize,
    #[arg(long, default_value_t = zsdet::projection::DEFAULT_RIDGE)]
    pub ridge: f64,
    /// JSON word embeddings (`{"dim": d, "classes": [{"id", "vector"}]}`).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Use generated stand-in embeddings of this dimension instead of a file.
    #[arg(long, conflicts_with = "embeddings")]
    pub synthetic_embeddings: Option<usize>,
    #[arg(long)]
    pub normalize_embeddings: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Prototype table from `zsdet prototypes`; the manifest attributes are
    /// used when omitted.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    /// Checkpoint path for the best epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Ablation::Full)]
    pub ablation: Ablation,
    #[arg(long, default_value_t = 3)]
    pub anchors: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Must equal the schedule's total when given.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Phases as `epochs:rate`, comma-separated, e.g. `1:1e-4,20:1e-3`.
    #[arg(long, value_delimiter = ',', conflicts_with = "long_schedule")]
    pub lr_schedule: Vec<String>,
    /// The 420-epoch 5/195/110/110 schedule.
    #[arg(long)]
    pub long_schedule: bool,
    #[arg(long, default_value_t = zsdet::train::DEFAULT_CLIP_NORM)]
    pub clip_norm: f64,
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long, value_enum, default_value_t = Noobj::CellRegion)]
    pub noobj: Noobj,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate images one after another instead of in parallel.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Required unless `--oracle-gt` is set.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for the CSV reports.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [SplitName::Seen, SplitName::Unseen, SplitName::Mix])]
    pub split: Vec<SplitName>,
    /// Score the ground truth itself at confidence 1.
    #[arg(long)]
    pub oracle_gt: bool,
    /// Grid size used with `--oracle-gt`.
    #[arg(long, default_value_t = 7)]
    pub grid: usize,
    /// Label detections by nearest prototype and report per-class AP.
    #[arg(long)]
    pub recognize: bool,
    #[arg(long)]
    pub no_nms: bool,
    #[arg(long, default_value_t = zsdet::detect::DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = zsdet::metrics::DEFAULT_MATCH_IOU)]
    pub match_iou: f64,
    #[arg(long, default_value_t = 0.0)]
    pub conf_floor: f64,
    #[arg(long, value_enum, default_value_t = FScore::Half)]
    pub fscore: FScore,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to read scenes from.
    #[arg(long, required_unless_present = "image")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitName::Unseen)]
    pub split: SplitName,
    /// A single PPM image instead of a manifest partition.
    #[arg(long, conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// Detections JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Debug PPM with box outlines (single image or first scene).
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub conf_floor: f64,
    #[arg(long)]
    pub no_nms: bool,
    #[arg(long, default_value_t = zsdet::detect::DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoMode {
    Attributes,
    Onehot,
    Random,
    #[value(name = "w2vR", alias = "w2vr")]
    W2vR,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    Visual,
    Semantic,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noobj {
    CellRegion,
    PredictedBox,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Seen,
    Unseen,
    Mix,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FScore {
    Half,
    Conventional,
}

const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Split(a) => commands::split(&a),
        Command::Prototypes(a) => commands::prototypes(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let diverged = err
                .chain()
                .any(|e| matches!(e.downcast_ref::<zsdet::Error>(), Some(zsdet::Error::Diverged { .. })));
            ExitCode::from(if diverged { EXIT_DIVERGED } else { EXIT_USAGE })
        }
    }
}
