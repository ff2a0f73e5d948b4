use std::collections::HashMap;

use rayon::prelude::*;

use super::artifacts::{ImageEntry, ImagePrediction, RegionPrediction};
use super::{truth_by_id, PipelineError};
use crate::crop::{resize_to_model, SubImageRecord};
use crate::merge::{merge_baselines, strategy_weights, MergeConfig, MergeStrategy};
use crate::metrics::{clustering_report, ClusteringReport};
use crate::mgvit::{pool_mask, MgVit};
use crate::ncdtrain::ClassDistribution;
use crate::scalar::Scalar;
use crate::synth::Split;
use crate::tensor::softmax;

/// Class distribution of every record: `softmax(logits / tau_s)` of the
/// chosen classifier head, over all known and novel classes.
pub fn predict_regions<T: Scalar>(
    model: &MgVit<T>,
    head: usize,
    tau_s: f64,
    records: &[SubImageRecord],
) -> Result<Vec<ClassDistribution<f64>>, PipelineError> {
    let side = model.config().input_side;
    records
        .par_iter()
        .map(|r| {
            let r = if r.sub_image.width() == side && r.sub_image.height() == side { r.clone() } else { resize_to_model(r, side) };
            let mask = pool_mask(&r.sub_mask, model.config())?;
            let out = model.forward(&r.sub_image, &mask)?;
            let logits = out.logits.get(head).ok_or_else(|| {
                PipelineError::Invalid(format!("classifier head {head} out of range"))
            })?;
            let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / tau_s).collect();
            Ok(ClassDistribution::new(softmax(&scaled))?)
        })
        .collect()
}

fn top3(probs: &[f64]) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter().take(3).map(|i| (i, probs[i])).collect()
}

/// Merges region predictions into one prediction per image id, in the
/// order of `image_ids`. Images without regions get a one-hot prediction
/// on `normal_slot`, normally the first novel class.
pub fn classify_images(
    image_ids: &[String],
    records: &[SubImageRecord],
    region_probs: &[ClassDistribution<f64>],
    num_classes: usize,
    normal_slot: usize,
    strategy: MergeStrategy,
    cfg: &MergeConfig,
) -> Result<Vec<ImagePrediction>, PipelineError> {
    if records.len() != region_probs.len() {
        return Err(PipelineError::Invalid(format!(
            "{} records but {} predictions",
            records.len(),
            region_probs.len()
        )));
    }
    if normal_slot >= num_classes || region_probs.iter().any(|p| p.len() != num_classes) {
        return Err(PipelineError::Invalid(format!("predictions do not have {num_classes} classes")));
    }
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        by_image.entry(r.image_id.as_str()).or_default().push(i);
    }
    image_ids
        .iter()
        .map(|id| {
            let mut members = by_image.remove(id.as_str()).unwrap_or_default();
            members.sort_by_key(|&i| records[i].region_index);
            if members.is_empty() {
                let probs = ClassDistribution::<f64>::one_hot(num_classes, normal_slot).into_vec();
                return Ok(ImagePrediction {
                    image_id: id.clone(),
                    top: top3(&probs),
                    label: normal_slot,
                    probs,
                    weights: Vec::new(),
                    regions: Vec::new(),
                });
            }
            let preds: Vec<ClassDistribution<f64>> = members.iter().map(|&i| region_probs[i].clone()).collect();
            let areas: Vec<usize> = members.iter().map(|&i| records[i].area).collect();
            let scores: Vec<f64> = members.iter().map(|&i| records[i].anomaly_score).collect();
            let merged = merge_baselines(&preds, &areas, &scores, strategy, cfg)?;
            let weights = strategy_weights(&areas, &scores, strategy, cfg)?;
            let regions = members
                .iter()
                .zip(&preds)
                .map(|(&i, p)| RegionPrediction {
                    region_index: records[i].region_index,
                    area: records[i].area,
                    score: records[i].anomaly_score,
                    probs: p.probs().to_vec(),
                    label: p.argmax(),
                })
                .collect();
            let label = merged.argmax();
            let probs = merged.into_vec();
            Ok(ImagePrediction { image_id: id.clone(), top: top3(&probs), label, probs, weights, regions })
        })
        .collect()
}

/// Clustering metrics over the unlabeled images of `truth` that carry a
/// ground-truth class.
pub fn evaluate_predictions(
    predictions: &[ImagePrediction],
    truth: &[ImageEntry],
    micro_f1: bool,
) -> Result<ClusteringReport, PipelineError> {
    let by_id: HashMap<&str, &ImagePrediction> = predictions.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let known = truth_by_id(truth);
    if let Some(p) = predictions.iter().find(|p| !known.contains_key(p.image_id.as_str())) {
        return Err(PipelineError::Invalid(format!("prediction for unknown image {}", p.image_id)));
    }
    let mut t = Vec::new();
    let mut p = Vec::new();
    for e in truth.iter().filter(|e| e.split == Split::Unlabeled) {
        let Some(class) = e.class_index else { continue };
        let pred = by_id
            .get(e.image_id.as_str())
            .ok_or_else(|| PipelineError::Invalid(format!("no prediction for image {}", e.image_id)))?;
        t.push(class);
        p.push(pred.label);
    }
    Ok(clustering_report(&t, &p, micro_f1)?)
}
