//! `mebinncd`: command-line front end for every pipeline stage.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mebinncd::mebin::Binarizer;
use mebinncd::pipeline::{PipelineError, SweepAxis};
use mebinncd::{Connectivity, MergeStrategy};

/// Anomaly-map binarization and novel anomaly class discovery.
///
/// Logging goes to stderr and is controlled by MEBINNCD_LOG
/// (error, warn, info, debug, trace; default info). On failure a JSON
/// error record {"status", "stage", "error"} is printed to stderr and the
/// exit status is nonzero.
#[derive(Debug, Parser)]
#[command(name = "mebinncd", version)]
struct Cli {
    /// Worker threads for per-image and per-view parallelism (default: all
    /// cores). Results do not depend on this value.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: images/, masks/, maps/, manifest.jsonl.
    Synth(SynthArgs),
    /// Binarize every anomaly map in a directory.
    Binarize(BinarizeArgs),
    /// Cut one sub-image per mask region.
    Crop(CropArgs),
    /// Train the classifier on cropped sub-images.
    Train(TrainArgs),
    /// Classify sub-images and merge them into image predictions.
    Classify(ClassifyArgs),
    /// Score image predictions against a manifest.
    Evaluate(EvaluateArgs),
    /// Run binarize, crop, train, classify and evaluate end to end.
    Pipeline(PipelineArgs),
    /// Run the pipeline once per value of one ablation axis.
    Sweep(SweepArgs),
    /// Checkpoint utilities.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Debug, Subcommand)]
enum ModelCommand {
    /// Print a checkpoint's configuration and parameter table as JSON.
    Inspect {
        /// Checkpoint file written by `train` or `pipeline`.
        ckpt: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Generator config as JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of unlabeled images.
    #[arg(long)]
    unlabeled: Option<usize>,
    /// Overrides the number of labeled images.
    #[arg(long)]
    labeled: Option<usize>,
}

#[derive(Debug, Args)]
struct MebinArgs {
    /// Binarizer: `mebin`, `otsu`, or a fixed threshold such as `0.3`
    /// (also accepted as `fixed:0.3`).
    #[arg(long, default_value = "mebin", value_parser = parse_binarizer)]
    binarizer: Binarizer,
    /// Number of thresholds swept by MEBin.
    #[arg(long = "T", value_name = "T", default_value_t = 64)]
    num_thresholds: usize,
    /// Minimum stable run length; shorter runs mean "no region".
    #[arg(long, default_value_t = 4)]
    tau: usize,
    /// Erosion radius applied while counting regions.
    #[arg(long, default_value_t = 1)]
    erosion: usize,
    /// Pixel connectivity, 4 or 8.
    #[arg(long, default_value = "8", value_parser = parse_connectivity)]
    connectivity: Connectivity,
}

#[derive(Debug, Args)]
struct BinarizeArgs {
    /// Directory of anomaly maps (`<id>.png` 16-bit or `<id>.f32`).
    #[arg(long)]
    maps: PathBuf,
    /// Output directory for masks/ and mebin_report.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mebin: MebinArgs,
}

#[derive(Debug, Args)]
struct CropArgs {
    /// Directory of grayscale source images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of binary masks; one crop per connected region.
    #[arg(long)]
    masks: PathBuf,
    /// Directory of anomaly maps, for region scores.
    #[arg(long)]
    maps: PathBuf,
    /// Output directory; writes crops.jsonl and crops/.
    #[arg(long)]
    out: PathBuf,
    /// Manifest used to select images by split and attach known labels.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split to crop when a manifest is given: `unlabeled`, `labeled` or `all`.
    #[arg(long, default_value = "all", requires = "manifest")]
    split: String,
    /// Fraction of the square side added on each side.
    #[arg(long, default_value_t = 0.10)]
    padding: f64,
    /// Minimum crop side as a fraction of the smaller image side.
    #[arg(long, default_value_t = 0.01)]
    min_size: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Unlabeled crops index (crops.jsonl).
    #[arg(long)]
    crops: PathBuf,
    /// Labeled crops index; every row must carry a label.
    #[arg(long)]
    labeled: Option<PathBuf>,
    /// Model config JSON; missing fields take their defaults.
    #[arg(long)]
    model_cfg: Option<PathBuf>,
    /// Training config JSON; missing fields take their defaults.
    #[arg(long)]
    train_cfg: Option<PathBuf>,
    /// Overrides the model and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for model.ckpt and history.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    /// Crops index to classify.
    #[arg(long)]
    crops: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest listing the images to predict (its unlabeled split). Images
    /// without crops are assigned the normal class. Without a manifest,
    /// only images that have crops are predicted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Region merging: `area`, `score` or `avg`.
    #[arg(long, default_value = "area")]
    strategy: MergeStrategy,
    /// Area-weight temperature.
    #[arg(long, default_value_t = 100.0)]
    merge_tau: f64,
    /// Softmax temperature applied to the classifier logits.
    #[arg(long, default_value_t = 0.1)]
    tau_s: f64,
    /// Output predictions.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Predictions written by `classify`.
    #[arg(long)]
    pred: PathBuf,
    /// Manifest with ground-truth classes.
    #[arg(long)]
    truth: PathBuf,
    /// Output report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth mask directory; with --pred-masks adds FPR/FNR.
    #[arg(long, requires = "pred_masks")]
    masks: Option<PathBuf>,
    /// Predicted mask directory (the masks/ written by `binarize`).
    #[arg(long, requires = "masks")]
    pred_masks: Option<PathBuf>,
    /// Report micro F1 as the headline F1 instead of macro F1.
    #[arg(long)]
    micro_f1: bool,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Pipeline config JSON. `paths` may be omitted when given by flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory in the `synth` layout; sets all four input paths.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Grayscale source images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Anomaly maps.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Ground-truth masks.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Manifest with splits and classes.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; stage caches go to <out>/stages.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the binarizer (`mebin`, `otsu` or a threshold).
    #[arg(long, value_parser = parse_binarizer)]
    binarizer: Option<Binarizer>,
    /// Overrides the region merging strategy.
    #[arg(long)]
    strategy: Option<MergeStrategy>,
    /// Report micro F1 as the headline F1.
    #[arg(long)]
    micro_f1: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// fixed-threshold, masked-layers (alias l-m), merge-strategy,
    /// plc-threshold or mask-target.
    #[arg(long)]
    axis: SweepAxis,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

fn parse_binarizer(s: &str) -> Result<Binarizer, String> {
    match s {
        "mebin" => Ok(Binarizer::Mebin),
        "otsu" => Ok(Binarizer::Otsu),
        _ => {
            let v = s.strip_prefix("fixed:").unwrap_or(s);
            v.parse::<f64>()
                .ok()
                .filter(|e| (0.0..=1.0).contains(e))
                .map(Binarizer::Fixed)
                .ok_or_else(|| format!("expected mebin, otsu or a threshold in [0, 1], got {s:?}"))
        }
    }
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    match s {
        "4" => Ok(Connectivity::Four),
        "8" => Ok(Connectivity::Eight),
        _ => Err(format!("connectivity must be 4 or 8, got {s:?}")),
    }
}

impl Command {
    /// Stage named in error records when the error carries none.
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Binarize(_) => "binarize",
            Command::Crop(_) => "crop",
            Command::Train(_) => "train",
            Command::Classify(_) => "classify",
            Command::Evaluate(_) => "evaluate",
            Command::Pipeline(_) => "pipeline",
            Command::Sweep(_) => "sweep",
            Command::Model { .. } => "model",
        }
    }
}

fn error_record(err: &anyhow::Error, fallback: &str) -> serde_json::Value {
    match err.downcast_ref::<PipelineError>() {
        Some(e) => {
            let mut rec = e.record();
            if rec["stage"].is_null() {
                rec["stage"] = fallback.into();
            }
            rec
        }
        None => serde_json::json!({ "status": "error", "stage": fallback, "error": format!("{err:#}") }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEBINNCD_LOG", "info")).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let stage = cli.command.stage();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_record(&err, stage));
            ExitCode::FAILURE
        }
    }
}
