//! End-to-end orchestration: binarize, crop, train, classify, evaluate.
//!
//! Every stage writes into a directory named after a hash of its inputs
//! and settings, so reruns and sweeps reuse unchanged upstream work.

mod artifacts;
mod classify;
mod sweep;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use artifacts::{
    load_crops, read_json, read_jsonl, write_json, write_jsonl, CropRow, ImageEntry, ImagePrediction, RegionPrediction,
};
pub use classify::{classify_images, evaluate_predictions, predict_regions};
pub use sweep::{ablation_sweep, sweep_variants, SweepAxis, SweepRow};

use crate::crop::{crop_regions, CropConfig, CropError, SubImageRecord};
use crate::mebin::{binarize, detected_threshold_range, otsu_threshold, Binarizer, MebinConfig, MebinError, ThresholdRange};
use crate::merge::{MergeConfig, MergeError, MergeStrategy};
use crate::metrics::{detection_rates, ClusteringReport, MetricsError};
use crate::mgvit::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ModelConfig, ModelError};
use crate::ncdtrain::{train, EpochStats, TrainConfig, TrainError};
use crate::raster::{
    load_anomaly_map, load_gray_image, load_mask, save_gray_image, save_mask, AnomalyMap, BinaryMask, RasterError,
};
use crate::synth::{Split, SynthError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Validate,
    Binarize,
    Crop,
    Train,
    Classify,
    Evaluate,
    Sweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Binarize => "binarize",
            Stage::Crop => "crop",
            Stage::Train => "train",
            Stage::Classify => "classify",
            Stage::Evaluate => "evaluate",
            Stage::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Mebin(#[from] MebinError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        PipelineError::Json { path: path.display().to_string(), source }
    }

    /// Stage that failed, when known.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// Machine-readable error record.
    pub fn record(&self) -> serde_json::Value {
        serde_json::json!({
            "status": "error",
            "stage": self.stage().map(Stage::name),
            "error": self.to_string(),
        })
    }
}

trait InStage<T> {
    fn in_stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<PipelineError>> InStage<T> for Result<T, E> {
    fn in_stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage { stage, source: Box::new(e.into()) })
    }
}

/// Input locations. Files are looked up by image id: `images/<id>.png`,
/// `masks/<id>.png`, `maps/<id>.png` (16-bit) or `maps/<id>.f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelinePaths {
    pub images: PathBuf,
    pub maps: PathBuf,
    /// Ground-truth masks: crop source for the labeled set, and detection
    /// ground truth for the unlabeled set.
    pub masks: PathBuf,
    pub manifest: PathBuf,
}

impl PipelinePaths {
    /// Layout written by the synth generator.
    pub fn corpus(dir: &Path) -> Self {
        Self {
            images: dir.join("images"),
            maps: dir.join("maps"),
            masks: dir.join("masks"),
            manifest: dir.join("manifest.jsonl"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    #[serde(default = "default_binarizer")]
    pub binarizer: Binarizer,
    #[serde(default)]
    pub mebin: MebinConfig,
    #[serde(default)]
    pub crop: CropConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub merge: MergeConfig,
    #[serde(default)]
    pub strategy: MergeStrategy,
    #[serde(default)]
    pub micro_f1: bool,
    /// Overrides the model and training seeds.
    #[serde(default)]
    pub seed: u64,
}

fn default_binarizer() -> Binarizer {
    Binarizer::Mebin
}

impl PipelineConfig {
    pub fn new(paths: PipelinePaths) -> Self {
        Self {
            paths,
            binarizer: Binarizer::Mebin,
            mebin: MebinConfig::default(),
            crop: CropConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            merge: MergeConfig::default(),
            strategy: MergeStrategy::default(),
            micro_f1: false,
            seed: 0,
        }
    }

    /// Copy with the top-level seed pushed into the nested configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.seed = self.seed;
        c.train.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.mebin.validate()?;
        self.crop.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.merge.tau_alpha > 0.0) {
            return Err(MergeError::InvalidConfig("tau_alpha must be > 0".into()).into());
        }
        if let Binarizer::Fixed(e) = self.binarizer {
            if !(0.0..=1.0).contains(&e) {
                return Err(PipelineError::Invalid(format!("fixed threshold {e} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-image line of `mebin_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarizedImage {
    pub image_id: String,
    pub selected_threshold: Option<f64>,
    pub modal_count: usize,
    pub region_count: usize,
    /// Component count per swept threshold (MEBin only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MebinReport {
    pub binarizer: Binarizer,
    pub range: ThresholdRange,
    pub thresholds: Vec<f64>,
    pub images: Vec<BinarizedImage>,
}

/// Binarizes every map; the threshold range spans the maps that carry
/// any response.
pub fn binarize_maps(
    maps: &[(String, AnomalyMap)],
    binarizer: Binarizer,
    cfg: &MebinConfig,
) -> Result<(MebinReport, Vec<BinaryMask>), PipelineError> {
    cfg.validate()?;
    let plain: Vec<AnomalyMap> = maps.iter().map(|(_, m)| m.clone()).collect();
    let range = detected_threshold_range(&plain)?;
    let results: Vec<(BinarizedImage, BinaryMask)> = maps
        .par_iter()
        .map(|(id, map)| -> Result<_, PipelineError> {
            let (selected, modal, counts, mask) = match binarizer {
                Binarizer::Mebin => {
                    let r = binarize(map, &range, cfg)?;
                    (r.selected_threshold, r.modal_count, r.per_threshold_counts, r.mask)
                }
                Binarizer::Fixed(e) => (Some(e), 0, Vec::new(), binarizer.apply(map, &range, cfg)?),
                Binarizer::Otsu => {
                    (otsu_threshold(map).ok(), 0, Vec::new(), binarizer.apply(map, &range, cfg)?)
                }
            };
            let region_count = crate::raster::connected_components(&mask, cfg.connectivity).count;
            let info = BinarizedImage {
                image_id: id.clone(),
                selected_threshold: selected,
                modal_count: modal,
                region_count,
                counts,
            };
            Ok((info, mask))
        })
        .collect::<Result<_, _>>()?;
    let (images, masks) = results.into_iter().unzip();
    let report = MebinReport { binarizer, range, thresholds: range.sample(cfg.num_thresholds), images };
    Ok((report, masks))
}

fn find_map(dir: &Path, id: &str) -> Result<PathBuf, PipelineError> {
    for ext in ["png", "f32", "raw"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(RasterError::MissingFile(dir.join(format!("{id}.png")).display().to_string()).into())
}

fn require_dir(dir: &Path) -> Result<(), PipelineError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(PipelineError::Invalid(format!("directory {} does not exist", dir.display())))
    }
}

/// Loads the maps of `ids` from `dir`.
pub fn load_maps(dir: &Path, ids: &[String]) -> Result<Vec<(String, AnomalyMap)>, PipelineError> {
    require_dir(dir)?;
    ids.par_iter().map(|id| Ok((id.clone(), load_anomaly_map(find_map(dir, id)?)?))).collect()
}

/// Every map in `dir`, keyed and sorted by file stem.
pub fn load_map_dir(dir: &Path) -> Result<Vec<(String, AnomalyMap)>, PipelineError> {
    require_dir(dir)?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if matches!(ext, "png" | "f32" | "raw") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.dedup();
    load_maps(dir, &ids)
}

/// Writes `masks/<id>.png` and `mebin_report.json` into `dir`.
pub fn write_binarized(dir: &Path, report: &MebinReport, masks: &[BinaryMask]) -> Result<(), PipelineError> {
    let mdir = dir.join("masks");
    fs::create_dir_all(&mdir).map_err(|e| PipelineError::io(&mdir, e))?;
    report
        .images
        .par_iter()
        .zip(masks.par_iter())
        .try_for_each(|(info, mask)| save_mask(mask, mdir.join(format!("{}.png", info.image_id))))?;
    write_json(&dir.join("mebin_report.json"), report)
}

/// One source image for cropping.
pub struct CropSource<'a> {
    pub image_id: &'a str,
    pub image: &'a crate::raster::GrayImage,
    pub mask: &'a BinaryMask,
    pub map: &'a AnomalyMap,
    pub label: Option<usize>,
}

/// Crops every region of every source, in source order.
pub fn crop_sources(sources: &[CropSource<'_>], cfg: &CropConfig) -> Result<Vec<SubImageRecord>, PipelineError> {
    let per: Vec<Vec<SubImageRecord>> = sources
        .par_iter()
        .map(|s| {
            let mut recs = crop_regions(s.image_id, s.image, s.mask, s.map, cfg)?;
            for r in &mut recs {
                r.label = s.label;
            }
            Ok::<_, PipelineError>(recs)
        })
        .collect::<Result<_, _>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Writes crop PNGs under `dir/<subdir>/` and the index `dir/<name>`.
pub fn write_crops(dir: &Path, name: &str, subdir: &str, records: &[SubImageRecord]) -> Result<PathBuf, PipelineError> {
    let cdir = dir.join(subdir);
    fs::create_dir_all(&cdir).map_err(|e| PipelineError::io(&cdir, e))?;
    let rows: Vec<CropRow> = records
        .par_iter()
        .map(|r| {
            let stem = format!("{}_r{}", r.image_id, r.region_index);
            let image = format!("{subdir}/{stem}.png");
            let mask = format!("{subdir}/{stem}_mask.png");
            save_gray_image(&r.sub_image, dir.join(&image))?;
            save_mask(&r.sub_mask, dir.join(&mask))?;
            Ok(CropRow {
                image_id: r.image_id.clone(),
                region_index: r.region_index,
                crop_box: r.crop_box,
                score: r.anomaly_score,
                area: r.area,
                label: r.label,
                image,
                mask,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let path = dir.join(name);
    write_jsonl(&path, &rows)?;
    Ok(path)
}

/// Trains on f32 and writes `model.ckpt` and `history.jsonl` into `dir`.
pub fn train_stage(
    dir: &Path,
    records: &[SubImageRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint<f32>, Vec<EpochStats>), PipelineError> {
    let outcome = train::<f32>(records, model, cfg)?;
    let ckpt = Checkpoint { model: outcome.model, inference_head: outcome.inference_head };
    save_checkpoint(&ckpt, dir.join("model.ckpt"))?;
    write_jsonl(&dir.join("history.jsonl"), &outcome.history)?;
    Ok((ckpt, outcome.history))
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String, PipelineError> {
    Ok(sha_hex(&fs::read(path).map_err(|e| PipelineError::io(path, e))?))
}

/// Digest over the named files' names and contents.
fn files_digest(paths: &[PathBuf]) -> Result<String, PipelineError> {
    let parts: Vec<String> = paths.par_iter().map(|p| file_digest(p)).collect::<Result<_, _>>()?;
    let mut h = Sha256::new();
    for (p, d) in paths.iter().zip(parts) {
        h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update(d.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn stage_key(stage: Stage, key: &impl Serialize) -> String {
    let json = serde_json::to_vec(key).expect("stage keys serialize");
    format!("{}-{}", stage.name(), &sha_hex(&json)[..16])
}

/// Runs `body` into a fresh stage directory unless a completed one exists.
fn cached<T>(
    root: &Path,
    name: &str,
    body: impl FnOnce(&Path) -> Result<T, PipelineError>,
    load: impl FnOnce(&Path) -> Result<T, PipelineError>,
) -> Result<T, PipelineError> {
    let dir = root.join(name);
    let done = dir.join(".done");
    if done.exists() {
        log::info!("reusing {}", dir.display());
        return load(&dir);
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    let out = body(&dir)?;
    fs::write(&done, b"").map_err(|e| PipelineError::io(&done, e))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub unlabeled: usize,
    pub labeled: usize,
    pub unlabeled_crops: usize,
    pub labeled_crops: usize,
    /// Unlabeled images for which binarization found no region.
    pub without_regions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
    pub inference_head: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub fpr: f64,
    pub fnr: f64,
    pub gt_regions: usize,
    pub pred_regions: usize,
}

/// Contents of `report.json`. Holds no timings, so equal inputs give
/// byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    /// Stage directory names under the cache root.
    pub stages: BTreeMap<String, String>,
    pub threshold_range: ThresholdRange,
    pub counts: ImageCounts,
    pub training: TrainingSummary,
    pub detection: DetectionSummary,
    pub clustering: ClusteringReport,
}

pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub predictions: Vec<ImagePrediction>,
    pub history: Vec<EpochStats>,
    pub checkpoint: PathBuf,
}

fn split_entries(entries: &[ImageEntry]) -> Result<(Vec<&ImageEntry>, Vec<&ImageEntry>), PipelineError> {
    let unlabeled: Vec<&ImageEntry> = entries.iter().filter(|e| e.split == Split::Unlabeled).collect();
    let labeled: Vec<&ImageEntry> = entries.iter().filter(|e| e.split == Split::Labeled).collect();
    if unlabeled.is_empty() {
        return Err(PipelineError::Invalid("manifest has no unlabeled images".into()));
    }
    if let Some(e) = labeled.iter().find(|e| e.label.is_none()) {
        return Err(PipelineError::Invalid(format!("labeled image {} has no label", e.image_id)));
    }
    Ok((unlabeled, labeled))
}

fn image_paths(dir: &Path, ids: &[&str]) -> Vec<PathBuf> {
    ids.iter().map(|id| dir.join(format!("{id}.png"))).collect()
}

/// Runs the whole pipeline, caching stages under `out/stages` and writing
/// `report.json` into `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutcome, PipelineError> {
    run_with_cache(cfg, &out.join("stages"), out)
}

/// As [`run_pipeline`] with an explicit stage cache root.
pub fn run_with_cache(cfg: &PipelineConfig, cache: &Path, out: &Path) -> Result<PipelineOutcome, PipelineError> {
    let cfg = cfg.resolved();
    cfg.validate().in_stage(Stage::Validate)?;
    log::info!("pipeline config: {}", serde_json::to_string(&cfg).unwrap_or_default());
    fs::create_dir_all(cache).map_err(|e| PipelineError::io(cache, e)).in_stage(Stage::Validate)?;
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e)).in_stage(Stage::Validate)?;
    let mut stages = BTreeMap::new();

    // binarize
    let entries: Vec<ImageEntry> = read_jsonl(&cfg.paths.manifest).in_stage(Stage::Binarize)?;
    let (unlabeled, labeled) = split_entries(&entries).in_stage(Stage::Binarize)?;
    let u_ids: Vec<String> = unlabeled.iter().map(|e| e.image_id.clone()).collect();
    let maps = load_maps(&cfg.paths.maps, &u_ids).in_stage(Stage::Binarize)?;
    let map_files: Vec<PathBuf> =
        u_ids.iter().map(|id| find_map(&cfg.paths.maps, id)).collect::<Result<_, _>>().in_stage(Stage::Binarize)?;
    let maps_digest = files_digest(&map_files).in_stage(Stage::Binarize)?;
    let bin_name = stage_key(Stage::Binarize, &(&maps_digest, &u_ids, cfg.binarizer, &cfg.mebin));
    let (mebin_report, pred_masks) = cached(
        cache,
        &bin_name,
        |dir| {
            let (report, masks) = binarize_maps(&maps, cfg.binarizer, &cfg.mebin)?;
            write_binarized(dir, &report, &masks)?;
            Ok((report, masks))
        },
        |dir| {
            let report: MebinReport = read_json(&dir.join("mebin_report.json"))?;
            let masks = report
                .images
                .par_iter()
                .map(|i| load_mask(dir.join("masks").join(format!("{}.png", i.image_id))).map_err(PipelineError::from))
                .collect::<Result<_, _>>()?;
            Ok((report, masks))
        },
    )
    .in_stage(Stage::Binarize)?;
    stages.insert("binarize".to_string(), bin_name.clone());

    // crop
    let l_ids: Vec<&str> = labeled.iter().map(|e| e.image_id.as_str()).collect();
    let u_refs: Vec<&str> = u_ids.iter().map(String::as_str).collect();
    let mut all_ids = u_refs.clone();
    all_ids.extend(&l_ids);
    let crop_inputs = (|| -> Result<(String, String), PipelineError> {
        require_dir(&cfg.paths.images)?;
        require_dir(&cfg.paths.masks)?;
        Ok((files_digest(&image_paths(&cfg.paths.images, &all_ids))?, files_digest(&image_paths(&cfg.paths.masks, &l_ids))?))
    })()
    .in_stage(Stage::Crop)?;
    let crop_name = stage_key(Stage::Crop, &(&bin_name, &crop_inputs, &l_ids, &labeled.iter().map(|e| e.label).collect::<Vec<_>>(), &cfg.crop));
    let (u_crops, l_crops) = cached(
        cache,
        &crop_name,
        |dir| {
            let u_images: Vec<_> = u_refs
                .par_iter()
                .map(|id| load_gray_image(cfg.paths.images.join(format!("{id}.png"))))
                .collect::<Result<_, _>>()?;
            let sources: Vec<CropSource> = (0..u_refs.len())
                .map(|i| CropSource { image_id: u_refs[i], image: &u_images[i], mask: &pred_masks[i], map: &maps[i].1, label: None })
                .collect();
            let u_crops = crop_sources(&sources, &cfg.crop)?;
            let l_maps = load_maps(&cfg.paths.maps, &l_ids.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
            let l_data: Vec<_> = l_ids
                .par_iter()
                .map(|id| -> Result<_, PipelineError> {
                    Ok((
                        load_gray_image(cfg.paths.images.join(format!("{id}.png")))?,
                        load_mask(cfg.paths.masks.join(format!("{id}.png")))?,
                    ))
                })
                .collect::<Result<_, _>>()?;
            let sources: Vec<CropSource> = (0..l_ids.len())
                .map(|i| CropSource {
                    image_id: l_ids[i],
                    image: &l_data[i].0,
                    mask: &l_data[i].1,
                    map: &l_maps[i].1,
                    label: labeled[i].label,
                })
                .collect();
            let l_crops = crop_sources(&sources, &cfg.crop)?;
            write_crops(dir, "crops.jsonl", "unlabeled", &u_crops)?;
            write_crops(dir, "labeled.jsonl", "labeled", &l_crops)?;
            Ok((u_crops, l_crops))
        },
        |dir| Ok((load_crops(&dir.join("crops.jsonl"))?, load_crops(&dir.join("labeled.jsonl"))?)),
    )
    .in_stage(Stage::Crop)?;
    stages.insert("crop".to_string(), crop_name.clone());

    // train
    let train_name = stage_key(Stage::Train, &(&crop_name, &cfg.model, &cfg.train));
    let (ckpt, history) = cached(
        cache,
        &train_name,
        |dir| {
            if u_crops.is_empty() {
                return Err(PipelineError::Invalid("binarization produced no unlabeled regions".into()));
            }
            let mut records = l_crops.clone();
            records.extend(u_crops.iter().cloned());
            train_stage(dir, &records, &cfg.model, &cfg.train)
        },
        |dir| Ok((load_checkpoint::<f32>(dir.join("model.ckpt"))?, read_jsonl(&dir.join("history.jsonl"))?)),
    )
    .in_stage(Stage::Train)?;
    stages.insert("train".to_string(), train_name.clone());
    let checkpoint = cache.join(&train_name).join("model.ckpt");

    // classify
    let classify_name = stage_key(Stage::Classify, &(&train_name, &cfg.merge, cfg.strategy));
    let predictions = cached(
        cache,
        &classify_name,
        |dir| {
            let probs = predict_regions(&ckpt.model, ckpt.inference_head, cfg.train.tau_s, &u_crops)?;
            let preds = classify_images(
                &u_ids,
                &u_crops,
                &probs,
                cfg.model.num_classes(),
                cfg.model.num_known_classes,
                cfg.strategy,
                &cfg.merge,
            )?;
            write_jsonl(&dir.join("predictions.jsonl"), &preds)?;
            Ok(preds)
        },
        |dir| read_jsonl(&dir.join("predictions.jsonl")),
    )
    .in_stage(Stage::Classify)?;
    stages.insert("classify".to_string(), classify_name);

    // evaluate
    let (clustering, detection) = (|| -> Result<_, PipelineError> {
        let clustering = evaluate_predictions(&predictions, &entries, cfg.micro_f1)?;
        let gt: Vec<BinaryMask> = u_ids
            .par_iter()
            .map(|id| load_mask(cfg.paths.masks.join(format!("{id}.png"))))
            .collect::<Result<_, _>>()?;
        let det = detection_rates(&gt, &pred_masks, cfg.mebin.connectivity)?;
        Ok((clustering, DetectionSummary { fpr: det.fpr, fnr: det.fnr, gt_regions: det.gt_regions, pred_regions: det.pred_regions }))
    })()
    .in_stage(Stage::Evaluate)?;

    let with_regions: std::collections::HashSet<&str> = u_crops.iter().map(|r| r.image_id.as_str()).collect();
    let report = PipelineReport {
        config: cfg.clone(),
        stages,
        threshold_range: mebin_report.range,
        counts: ImageCounts {
            unlabeled: u_ids.len(),
            labeled: l_ids.len(),
            unlabeled_crops: u_crops.len(),
            labeled_crops: l_crops.len(),
            without_regions: u_ids.len() - with_regions.len(),
        },
        training: TrainingSummary {
            epochs: history.len(),
            first_epoch_loss: history.first().map(|h| h.mean.total).unwrap_or(f64::NAN),
            final_epoch_loss: history.last().map(|h| h.mean.total).unwrap_or(f64::NAN),
            inference_head: ckpt.inference_head,
        },
        detection,
        clustering,
    };
    write_json(&out.join("report.json"), &report).in_stage(Stage::Evaluate)?;
    log::info!(
        "nmi {:.4} ari {:.4} f1 {:.4} fpr {:.4} fnr {:.4}",
        report.clustering.nmi,
        report.clustering.ari,
        report.clustering.f1,
        report.detection.fpr,
        report.detection.fnr
    );
    Ok(PipelineOutcome { report, predictions, history, checkpoint })
}

/// Labels keyed by image id, for joining predictions with a manifest.
pub(crate) fn truth_by_id(entries: &[ImageEntry]) -> HashMap<&str, &ImageEntry> {
    entries.iter().map(|e| (e.image_id.as_str(), e)).collect()
}
