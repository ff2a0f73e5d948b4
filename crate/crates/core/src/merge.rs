//! Image-level predictions from per-region predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ncdtrain::ClassDistribution;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("no sub-image predictions to merge")]
    EmptyInput,
    #[error("{predictions} predictions but {other} areas/scores")]
    LengthMismatch { predictions: usize, other: usize },
    #[error("predictions have differing class counts")]
    ClassCountMismatch,
    #[error("invalid merge config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    /// Unweighted mean.
    Avg,
    /// Softmax of region anomaly scores.
    Score,
    /// Softmax of `sqrt(area) / tau_alpha`.
    #[default]
    Area,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 3] = [MergeStrategy::Avg, MergeStrategy::Score, MergeStrategy::Area];

    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::Avg => "avg",
            MergeStrategy::Score => "score",
            MergeStrategy::Area => "area",
        }
    }
}

impl std::str::FromStr for MergeStrategy {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" | "i" => Ok(MergeStrategy::Avg),
            "score" | "ii" => Ok(MergeStrategy::Score),
            "area" | "iii" => Ok(MergeStrategy::Area),
            _ => Err(MergeError::InvalidConfig(format!("unknown merge strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub tau_alpha: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { tau_alpha: 100.0 }
    }
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Region weights `softmax(sqrt(area) / tau_alpha)`.
pub fn area_weights(areas: &[usize], tau_alpha: f64) -> Result<Vec<f64>, MergeError> {
    if !(tau_alpha > 0.0) {
        return Err(MergeError::InvalidConfig("tau_alpha must be > 0".into()));
    }
    if areas.is_empty() {
        return Err(MergeError::EmptyInput);
    }
    Ok(softmax(&areas.iter().map(|&a| (a as f64).sqrt() / tau_alpha).collect::<Vec<_>>()))
}

fn weighted<T: Scalar>(preds: &[ClassDistribution<T>], weights: &[f64]) -> Result<ClassDistribution<T>, MergeError> {
    let k = preds[0].len();
    if preds.iter().any(|p| p.len() != k) {
        return Err(MergeError::ClassCountMismatch);
    }
    let mut acc = vec![0.0f64; k];
    for (p, &w) in preds.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(p.probs()) {
            *a += w * v.as_f64();
        }
    }
    let z: f64 = acc.iter().sum();
    ClassDistribution::new(acc.iter().map(|v| T::of(v / z)).collect()).map_err(|_| MergeError::ClassCountMismatch)
}

fn check_lengths<T>(preds: &[ClassDistribution<T>], other: usize) -> Result<(), MergeError> {
    if preds.is_empty() {
        return Err(MergeError::EmptyInput);
    }
    if preds.len() != other {
        return Err(MergeError::LengthMismatch { predictions: preds.len(), other });
    }
    Ok(())
}

/// Area-weighted merge; returns the image prediction and the weights.
pub fn merge_image<T: Scalar>(
    predictions: &[ClassDistribution<T>],
    areas: &[usize],
    cfg: &MergeConfig,
) -> Result<(ClassDistribution<T>, Vec<f64>), MergeError> {
    check_lengths(predictions, areas.len())?;
    let weights = area_weights(areas, cfg.tau_alpha)?;
    Ok((weighted(predictions, &weights)?, weights))
}

/// Merge with any of the three strategies.
pub fn merge_baselines<T: Scalar>(
    predictions: &[ClassDistribution<T>],
    areas: &[usize],
    scores: &[f64],
    strategy: MergeStrategy,
    cfg: &MergeConfig,
) -> Result<ClassDistribution<T>, MergeError> {
    check_lengths(predictions, areas.len())?;
    check_lengths(predictions, scores.len())?;
    weighted(predictions, &strategy_weights(areas, scores, strategy, cfg)?)
}

/// Region weights used by `strategy`.
pub fn strategy_weights(
    areas: &[usize],
    scores: &[f64],
    strategy: MergeStrategy,
    cfg: &MergeConfig,
) -> Result<Vec<f64>, MergeError> {
    if areas.is_empty() {
        return Err(MergeError::EmptyInput);
    }
    if areas.len() != scores.len() {
        return Err(MergeError::LengthMismatch { predictions: areas.len(), other: scores.len() });
    }
    match strategy {
        MergeStrategy::Avg => Ok(vec![1.0 / areas.len() as f64; areas.len()]),
        MergeStrategy::Score => Ok(softmax(scores)),
        MergeStrategy::Area => area_weights(areas, cfg.tau_alpha),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(v: Vec<f64>) -> ClassDistribution<f64> {
        ClassDistribution::new(v).unwrap()
    }

    #[test]
    fn worked_example() {
        let w = area_weights(&[400, 25], 100.0).unwrap();
        let want = 0.2f64.exp() / (0.2f64.exp() + 0.05f64.exp());
        assert!((w[0] - want).abs() < 1e-12);
        assert!((w[0] - 0.5374).abs() < 1e-4);
        assert!((w[1] - 0.4626).abs() < 1e-4);
    }

    #[test]
    fn singleton_and_equal_areas() {
        let p = d(vec![0.1, 0.7, 0.2]);
        let (m, w) = merge_image(std::slice::from_ref(&p), &[50], &MergeConfig::default()).unwrap();
        assert_eq!(w, vec![1.0]);
        for (a, b) in m.probs().iter().zip(p.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
        for s in MergeStrategy::ALL {
            let m = merge_baselines(std::slice::from_ref(&p), &[50], &[0.4], s, &MergeConfig::default()).unwrap();
            assert!(m.probs().iter().zip(p.probs()).all(|(a, b)| (a - b).abs() < 1e-15));
        }
        let q = d(vec![0.5, 0.1, 0.4]);
        let (m, _) = merge_image(&[p.clone(), q.clone()], &[9, 9], &MergeConfig::default()).unwrap();
        let avg = merge_baselines(&[p, q], &[9, 9], &[0.1, 0.9], MergeStrategy::Avg, &MergeConfig::default()).unwrap();
        assert_eq!(m, avg);
        assert!((avg.probs()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn score_strategy_favours_confident_region() {
        let p = d(vec![1.0, 0.0]);
        let q = d(vec![0.0, 1.0]);
        let m = merge_baselines(&[p, q], &[1, 1], &[0.9, 0.1], MergeStrategy::Score, &MergeConfig::default()).unwrap();
        let want = 1.0 / (1.0 + (-0.8f64).exp());
        assert!((m.probs()[0] - want).abs() < 1e-12);
        assert!(m.probs()[0] > 0.5);
    }

    #[test]
    fn errors() {
        let cfg = MergeConfig::default();
        assert_eq!(merge_image::<f64>(&[], &[], &cfg).unwrap_err(), MergeError::EmptyInput);
        assert!(matches!(merge_image(&[d(vec![1.0])], &[1, 2], &cfg), Err(MergeError::LengthMismatch { .. })));
        assert!(area_weights(&[1], 0.0).is_err());
        assert_eq!("iii".parse::<MergeStrategy>().unwrap(), MergeStrategy::Area);
    }

    proptest! {
        #[test]
        fn weights_are_monotone_distributions(
            areas in proptest::collection::vec(0usize..5000, 1..8),
            tau in 1.0f64..500.0,
        ) {
            let w = area_weights(&areas, tau).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..areas.len() {
                for j in 0..areas.len() {
                    if areas[i] > areas[j] {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }

        #[test]
        fn merging_is_permutation_invariant(
            raw in proptest::collection::vec(0.01f64..1.0, 4 * 3),
            areas in proptest::collection::vec(1usize..900, 4),
            rot in 0usize..4,
        ) {
            let preds: Vec<_> = raw.chunks(3).map(|c| {
                let s: f64 = c.iter().sum();
                d(c.iter().map(|v| v / s).collect())
            }).collect();
            let cfg = MergeConfig::default();
            let (m, w) = merge_image(&preds, &areas, &cfg).unwrap();
            let pp: Vec<_> = (0..4).map(|i| preds[(i + rot) % 4].clone()).collect();
            let pa: Vec<_> = (0..4).map(|i| areas[(i + rot) % 4]).collect();
            let (m2, w2) = merge_image(&pp, &pa, &cfg).unwrap();
            for i in 0..4 {
                prop_assert!((w2[i] - w[(i + rot) % 4]).abs() < 1e-15);
            }
            for (a, b) in m.probs().iter().zip(m2.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
