//! Main element binarization: per-image threshold selection from the
//! stability of the connected-component count over a threshold sweep.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{connected_components, erode, reconstruct, AnomalyMap, BinaryMask, Connectivity};

#[derive(Debug, Error, PartialEq)]
pub enum MebinError {
    #[error("no anomaly maps supplied")]
    EmptyInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid threshold range [{s_min}, {s_max}]")]
    InvalidRange { s_min: f64, s_max: f64 },
    #[error("histogram has fewer than two occupied bins")]
    DegenerateHistogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MebinConfig {
    pub num_thresholds: usize,
    pub min_stable_run: usize,
    pub erosion_radius: usize,
    pub connectivity: Connectivity,
}

impl Default for MebinConfig {
    fn default() -> Self {
        Self { num_thresholds: 64, min_stable_run: 4, erosion_radius: 1, connectivity: Connectivity::Eight }
    }
}

impl MebinConfig {
    pub fn validate(&self) -> Result<(), MebinError> {
        if self.num_thresholds < 2 {
            return Err(MebinError::InvalidConfig("num_thresholds must be >= 2".into()));
        }
        if self.min_stable_run < 1 {
            return Err(MebinError::InvalidConfig("min_stable_run must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRange {
    pub s_min: f64,
    pub s_max: f64,
}

impl ThresholdRange {
    pub fn new(s_min: f64, s_max: f64) -> Result<Self, MebinError> {
        if !(0.0 <= s_min && s_min <= s_max && s_max <= 1.0) {
            return Err(MebinError::InvalidRange { s_min, s_max });
        }
        Ok(Self { s_min, s_max })
    }

    /// `n` uniformly spaced thresholds, both endpoints included.
    pub fn sample(&self, n: usize) -> Vec<f64> {
        let span = self.s_max - self.s_min;
        (0..n).map(|j| self.s_min + span * j as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MebinResult {
    pub mask: BinaryMask,
    pub selected_threshold: Option<f64>,
    /// Most frequent nonzero per-threshold count; 0 when there is none.
    pub modal_count: usize,
    /// Connected components in `mask`.
    pub region_count: usize,
    pub thresholds: Vec<f64>,
    pub per_threshold_counts: Vec<usize>,
}

/// `s_max = 1`, `s_min` = smallest per-map maximum.
pub fn compute_threshold_range(maps: &[AnomalyMap]) -> Result<ThresholdRange, MebinError> {
    let s_min = maps
        .iter()
        .map(|m| m.max_value() as f64)
        .reduce(f64::min)
        .ok_or(MebinError::EmptyInput)?;
    ThresholdRange::new(s_min, 1.0)
}

/// Like [`compute_threshold_range`] but ignores maps that are zero
/// everywhere, which carry no detection to bound the sweep from below.
/// Falls back to `[0, 1]` when every map is empty.
pub fn detected_threshold_range(maps: &[AnomalyMap]) -> Result<ThresholdRange, MebinError> {
    if maps.is_empty() {
        return Err(MebinError::EmptyInput);
    }
    let s_min = maps
        .iter()
        .map(|m| m.max_value() as f64)
        .filter(|&v| v > 0.0)
        .reduce(f64::min)
        .unwrap_or(0.0);
    ThresholdRange::new(s_min, 1.0)
}

/// Erodes, then restores every thresholded component that survived the
/// erosion to its full extent.
fn clean(raw: &BinaryMask, cfg: &MebinConfig) -> BinaryMask {
    if cfg.erosion_radius == 0 {
        return raw.clone();
    }
    let eroded = erode(raw, cfg.erosion_radius);
    reconstruct(&eroded, raw, cfg.connectivity)
}

/// Thresholds strictly at `epsilon`, then drops the components that do
/// not survive erosion.
pub fn fixed_threshold_binarize(map: &AnomalyMap, epsilon: f64, cfg: &MebinConfig) -> BinaryMask {
    clean(&map.threshold(epsilon), cfg)
}

fn modal_nonzero(counts: &[usize]) -> Option<usize> {
    let max = *counts.iter().max()?;
    let mut freq = vec![0usize; max + 1];
    for &c in counts {
        freq[c] += 1;
    }
    // ties resolve to the smaller count
    (1..=max).filter(|&c| freq[c] > 0).max_by(|&a, &b| freq[a].cmp(&freq[b]).then(b.cmp(&a)))
}

/// Longest run of `value` as `(start, len)`; ties resolve to the earliest.
fn longest_run(counts: &[usize], value: usize) -> (usize, usize) {
    let mut best = (0, 0);
    let mut j = 0;
    while j < counts.len() {
        if counts[j] != value {
            j += 1;
            continue;
        }
        let start = j;
        while j < counts.len() && counts[j] == value {
            j += 1;
        }
        if j - start > best.1 {
            best = (start, j - start);
        }
    }
    best
}

pub fn binarize(map: &AnomalyMap, range: &ThresholdRange, cfg: &MebinConfig) -> Result<MebinResult, MebinError> {
    cfg.validate()?;
    let thresholds = range.sample(cfg.num_thresholds);
    let per_threshold_counts: Vec<usize> = thresholds
        .iter()
        .map(|&eps| {
            let eroded = erode(&map.threshold(eps), cfg.erosion_radius);
            connected_components(&eroded, cfg.connectivity).count
        })
        .collect();

    let empty = |modal_count| MebinResult {
        mask: BinaryMask::zeros(map.width(), map.height()),
        selected_threshold: None,
        modal_count,
        region_count: 0,
        thresholds: thresholds.clone(),
        per_threshold_counts: per_threshold_counts.clone(),
    };

    let Some(modal) = modal_nonzero(&per_threshold_counts) else {
        return Ok(empty(0));
    };
    let (start, len) = longest_run(&per_threshold_counts, modal);
    if len < cfg.min_stable_run {
        return Ok(empty(modal));
    }
    let selected = thresholds[start];
    let mask = fixed_threshold_binarize(map, selected, cfg);
    let region_count = connected_components(&mask, cfg.connectivity).count;
    Ok(MebinResult {
        mask,
        selected_threshold: Some(selected),
        modal_count: modal,
        region_count,
        thresholds,
        per_threshold_counts,
    })
}

/// Otsu threshold over a 256-bin histogram, bin `k` covering
/// `[k/256, (k+1)/256)`. Returns the upper edge of the last background
/// bin; ties go to the lower threshold.
pub fn otsu_threshold(map: &AnomalyMap) -> Result<f64, MebinError> {
    let mut hist = [0u64; 256];
    for &v in map.data() {
        hist[quantize(v)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(MebinError::DegenerateHistogram);
    }
    let total = map.data().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(k, &c)| k as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, k);
        }
    }
    Ok((best.1 + 1) as f64 / 256.0)
}

fn quantize(v: f32) -> usize {
    ((v as f64 * 256.0).floor() as usize).min(255)
}

/// Binarization strategies compared in the threshold ablation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epsilon")]
pub enum Binarizer {
    Mebin,
    Fixed(f64),
    Otsu,
}

impl Binarizer {
    pub fn name(&self) -> String {
        match self {
            Binarizer::Mebin => "mebin".into(),
            Binarizer::Fixed(e) => format!("eps={e}"),
            Binarizer::Otsu => "otsu".into(),
        }
    }

    /// A constant map has no Otsu split and yields an empty mask.
    pub fn apply(&self, map: &AnomalyMap, range: &ThresholdRange, cfg: &MebinConfig) -> Result<BinaryMask, MebinError> {
        match *self {
            Binarizer::Mebin => binarize(map, range, cfg).map(|r| r.mask),
            Binarizer::Fixed(eps) => Ok(fixed_threshold_binarize(map, eps, cfg)),
            Binarizer::Otsu => match otsu_threshold(map) {
                Ok(t) => Ok(fixed_threshold_binarize(map, t, cfg)),
                Err(MebinError::DegenerateHistogram) => Ok(BinaryMask::zeros(map.width(), map.height())),
                Err(e) => Err(e),
            },
        }
    }
}

/// Fixed thresholds of the binarization ablation.
pub const FIXED_THRESHOLD_SWEEP: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
