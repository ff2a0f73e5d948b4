use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::json;

use mebinncd::crop::CropConfig;
use mebinncd::mebin::MebinConfig;
use mebinncd::merge::MergeConfig;
use mebinncd::metrics::detection_rates;
use mebinncd::mgvit::{load_checkpoint, ModelConfig};
use mebinncd::ncdtrain::TrainConfig;
use mebinncd::pipeline::{
    ablation_sweep, binarize_maps, classify_images, crop_sources, evaluate_predictions, load_crops, load_map_dir,
    load_maps, predict_regions, read_jsonl, run_pipeline, train_stage, write_binarized, write_crops, write_json,
    write_jsonl, CropSource, ImageEntry, ImagePrediction, PipelineConfig, PipelinePaths,
};
use mebinncd::raster::{load_gray_image, load_mask};
use mebinncd::synth::{generate, write_corpus, Split, SynthConfig};

use crate::{
    BinarizeArgs, ClassifyArgs, Command, CropArgs, EvaluateArgs, ModelCommand, PipelineArgs, SweepArgs, SynthArgs,
    TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Binarize(a) => binarize(a),
        Command::Crop(a) => crop(a),
        Command::Train(a) => train(a),
        Command::Classify(a) => classify(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Sweep(a) => sweep(a),
        Command::Model { command: ModelCommand::Inspect { ckpt } } => inspect(&ckpt),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Prints to stdout; a closed pipe is not an error.
fn print_json(value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).unwrap_or_default();
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.unlabeled {
        cfg.num_unlabeled = n;
    }
    if let Some(n) = a.labeled {
        cfg.num_labeled = n;
    }
    let corpus = generate(&cfg)?;
    write_corpus(&corpus, &a.out)?;
    log::info!("wrote {} images to {}", corpus.images.len(), a.out.display());
    Ok(())
}

fn binarize(a: BinarizeArgs) -> Result<()> {
    let cfg = MebinConfig {
        num_thresholds: a.mebin.num_thresholds,
        min_stable_run: a.mebin.tau,
        erosion_radius: a.mebin.erosion,
        connectivity: a.mebin.connectivity,
    };
    let maps = load_map_dir(&a.maps)?;
    if maps.is_empty() {
        bail!("no anomaly maps in {}", a.maps.display());
    }
    let (report, masks) = binarize_maps(&maps, a.mebin.binarizer, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_binarized(&a.out, &report, &masks)?;
    let with_regions = report.images.iter().filter(|i| i.region_count > 0).count();
    log::info!("binarized {} maps, {} with regions", report.images.len(), with_regions);
    Ok(())
}

/// PNG file stems in `dir`, sorted.
fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn crop(a: CropArgs) -> Result<()> {
    let cfg = CropConfig { padding_frac: a.padding, min_size_frac: a.min_size, ..CropConfig::default() };
    cfg.validate()?;
    let mut ids = png_stems(&a.masks)?;
    let mut labels: HashMap<String, usize> = HashMap::new();
    if let Some(manifest) = &a.manifest {
        let split = match a.split.as_str() {
            "unlabeled" => Some(Split::Unlabeled),
            "labeled" => Some(Split::Labeled),
            "all" => None,
            other => bail!("unknown split {other:?}; expected unlabeled, labeled or all"),
        };
        let entries: Vec<ImageEntry> = read_jsonl(manifest)?;
        let keep: BTreeSet<&str> =
            entries.iter().filter(|e| split.is_none_or(|s| e.split == s)).map(|e| e.image_id.as_str()).collect();
        ids.retain(|id| keep.contains(id.as_str()));
        labels = entries.iter().filter_map(|e| Some((e.image_id.clone(), e.label?))).collect();
    }
    let maps = load_maps(&a.maps, &ids)?;
    let data: Vec<_> = ids
        .iter()
        .map(|id| -> Result<_> {
            let file = format!("{id}.png");
            Ok((load_gray_image(a.images.join(&file))?, load_mask(a.masks.join(&file))?))
        })
        .collect::<Result<_>>()?;
    let sources: Vec<CropSource> = ids
        .iter()
        .zip(&data)
        .zip(&maps)
        .map(|((id, (image, mask)), (_, map))| CropSource {
            image_id: id,
            image,
            mask,
            map,
            label: labels.get(id).copied(),
        })
        .collect();
    let records = crop_sources(&sources, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let index = write_crops(&a.out, "crops.jsonl", "crops", &records)?;
    log::info!("{} crops from {} images written to {}", records.len(), ids.len(), index.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut model: ModelConfig = read_config(a.model_cfg.as_deref())?;
    let mut cfg: TrainConfig = read_config(a.train_cfg.as_deref())?;
    if let Some(s) = a.seed {
        model.seed = s;
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let mut records = Vec::new();
    if let Some(labeled) = &a.labeled {
        records = load_crops(labeled)?;
        if let Some(r) = records.iter().find(|r| r.label.is_none()) {
            bail!("labeled crop {} region {} has no label", r.image_id, r.region_index);
        }
    }
    let mut unlabeled = load_crops(&a.crops)?;
    for r in &mut unlabeled {
        r.label = None;
    }
    records.extend(unlabeled);
    log::info!("model config: {}", serde_json::to_string(&model)?);
    log::info!("train config: {}", serde_json::to_string(&cfg)?);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (ckpt, history) = train_stage(&a.out, &records, &model, &cfg)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!(
            "loss {:.4} -> {:.4} over {} epochs, inference head {}",
            first.mean.total,
            last.mean.total,
            history.len(),
            ckpt.inference_head
        );
    }
    Ok(())
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.ckpt)?;
    let records = load_crops(&a.crops)?;
    let image_ids: Vec<String> = match &a.manifest {
        Some(m) => read_jsonl::<ImageEntry>(m)?
            .into_iter()
            .filter(|e| e.split == Split::Unlabeled)
            .map(|e| e.image_id)
            .collect(),
        None => records.iter().map(|r| r.image_id.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let model_cfg = ckpt.model.config().clone();
    let probs = predict_regions(&ckpt.model, ckpt.inference_head, a.tau_s, &records)?;
    let preds = classify_images(
        &image_ids,
        &records,
        &probs,
        model_cfg.num_classes(),
        model_cfg.num_known_classes,
        a.strategy,
        &MergeConfig { tau_alpha: a.merge_tau },
    )?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_jsonl(&a.out, &preds)?;
    log::info!("{} image predictions written to {}", preds.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let preds: Vec<ImagePrediction> = read_jsonl(&a.pred)?;
    let truth: Vec<ImageEntry> = read_jsonl(&a.truth)?;
    let clustering = evaluate_predictions(&preds, &truth, a.micro_f1)?;
    let mut report = json!({ "clustering": clustering });
    if let (Some(gt_dir), Some(pred_dir)) = (&a.masks, &a.pred_masks) {
        let ids: Vec<&str> =
            truth.iter().filter(|e| e.split == Split::Unlabeled).map(|e| e.image_id.as_str()).collect();
        let load = |dir: &PathBuf| -> Result<Vec<_>> {
            ids.iter().map(|id| Ok(load_mask(dir.join(format!("{id}.png")))?)).collect()
        };
        let det = detection_rates(&load(gt_dir)?, &load(pred_dir)?, Default::default())?;
        report["detection"] = json!({
            "fpr": det.fpr,
            "fnr": det.fnr,
            "gt_regions": det.gt_regions,
            "pred_regions": det.pred_regions,
        });
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_json(&a.out, &report)?;
    log::info!("nmi {:.4} ari {:.4} f1 {:.4}", clustering.nmi, clustering.ari, clustering.f1);
    Ok(())
}

fn pipeline_config(a: &PipelineArgs) -> Result<PipelineConfig> {
    let mut value = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<serde_json::Value>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => json!({}),
    };
    if !value.is_object() {
        bail!("pipeline config must be a JSON object");
    }
    let mut paths: Option<PipelinePaths> = match value.get("paths") {
        Some(p) => Some(serde_json::from_value(p.clone()).context("parsing config paths")?),
        None => None,
    };
    if let Some(dir) = &a.corpus {
        paths = Some(PipelinePaths::corpus(dir));
    }
    let overrides = [&a.images, &a.maps, &a.masks, &a.manifest];
    if overrides.iter().any(|o| o.is_some()) {
        let base = paths.get_or_insert_with(|| PipelinePaths::corpus(Path::new(".")));
        let set = |slot: &mut PathBuf, v: &Option<PathBuf>| {
            if let Some(v) = v {
                *slot = v.clone();
            }
        };
        set(&mut base.images, &a.images);
        set(&mut base.maps, &a.maps);
        set(&mut base.masks, &a.masks);
        set(&mut base.manifest, &a.manifest);
    }
    let Some(paths) = paths else {
        bail!("no input paths: pass --corpus, the individual path flags, or a config with \"paths\"");
    };
    value["paths"] = serde_json::to_value(&paths)?;
    let mut cfg: PipelineConfig = serde_json::from_value(value).context("parsing pipeline config")?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.binarizer {
        cfg.binarizer = b;
    }
    if let Some(s) = a.strategy {
        cfg.strategy = s;
    }
    cfg.micro_f1 |= a.micro_f1;
    Ok(cfg)
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let cfg = pipeline_config(&a)?;
    let outcome = run_pipeline(&cfg, &a.out)?;
    let r = &outcome.report;
    print_json(&json!({
        "status": "ok",
        "report": a.out.join("report.json"),
        "nmi": r.clustering.nmi,
        "ari": r.clustering.ari,
        "f1": r.clustering.f1,
        "fpr": r.detection.fpr,
        "fnr": r.detection.fnr,
    }));
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = pipeline_config(&a.pipeline)?;
    let rows = ablation_sweep(&cfg, a.axis, &a.pipeline.out)?;
    print_json(&serde_json::to_value(&rows)?);
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ckpt = load_checkpoint::<f64>(path)?;
    let params = ckpt.model.params();
    let table: Vec<_> = params.iter().map(|(name, m)| json!({ "name": name, "shape": [m.rows(), m.cols()] })).collect();
    print_json(&json!({
        "model": ckpt.model.config(),
        "inference_head": ckpt.inference_head,
        "num_tensors": params.len(),
        "num_scalars": params.num_scalars(),
        "parameters": table,
    }));
    Ok(())
}
