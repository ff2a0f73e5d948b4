//! Row types for the JSONL artifacts exchanged between stages.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::crop::SubImageRecord;
use crate::raster::{load_gray_image, load_mask, BoundingBox};
use crate::synth::Split;

/// One line of `crops.jsonl`. Image paths are relative to the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRow {
    pub image_id: String,
    pub region_index: usize,
    #[serde(rename = "box")]
    pub crop_box: BoundingBox,
    pub score: f64,
    pub area: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub image: String,
    pub mask: String,
}

/// Per-image entry of a corpus manifest. Extra fields are ignored, so a
/// synth `manifest.jsonl` reads directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub split: Split,
    /// Known-class index for labeled images.
    #[serde(default)]
    pub label: Option<usize>,
    /// Ground-truth index over known then novel classes, when available.
    #[serde(default)]
    pub class_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPrediction {
    pub region_index: usize,
    pub area: usize,
    pub score: f64,
    pub probs: Vec<f64>,
    pub label: usize,
}

/// One line of `predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub image_id: String,
    pub probs: Vec<f64>,
    pub label: usize,
    /// Three most probable classes as `(class, probability)`.
    pub top: Vec<(usize, f64)>,
    /// Merge weights in region order; empty when the image had no region.
    pub weights: Vec<f64>,
    pub regions: Vec<RegionPrediction>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PipelineError::Json {
            path: format!("{}:{}", path.display(), i + 1),
            source,
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|source| PipelineError::json(path, source))?;
        writeln!(w, "{line}").map_err(|e| PipelineError::io(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::json(path, source))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::json(path, source))
}

fn base_dir(jsonl: &Path) -> PathBuf {
    jsonl.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads `crops.jsonl` back into records at their stored resolution.
pub fn load_crops(path: &Path) -> Result<Vec<SubImageRecord>, PipelineError> {
    let dir = base_dir(path);
    read_jsonl::<CropRow>(path)?
        .into_iter()
        .map(|row| {
            Ok(SubImageRecord {
                sub_image: load_gray_image(dir.join(&row.image))?,
                sub_mask: load_mask(dir.join(&row.mask))?,
                image_id: row.image_id,
                region_index: row.region_index,
                anomaly_score: row.score,
                area: row.area,
                crop_box: row.crop_box,
                label: row.label,
            })
        })
        .collect()
}
