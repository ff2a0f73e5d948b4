//! Novel-class discovery training: teacher-student pseudo labels with
//! anomaly-score correction, contrastive and cross-view classification
//! losses, a mean-entropy regularizer and the SGD training loop.

mod augment;
mod gradcheck;
mod losses;
mod pseudo;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mgvit::ModelError;
use crate::scalar::Scalar;

pub use augment::{augment, AugmentConfig, AugmentParams, View};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use losses::{
    loss_classification, loss_contrastive_self, loss_contrastive_supervised, loss_regularizer,
};
pub use pseudo::{correct_pseudo_label, pseudo_label, teacher_temperature};
pub use train::{
    batch_objective, prepare_items, train, BatchItem, EpochStats, Objective, ObjectiveParts, PseudoTargets, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model/train config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("all classes are masked: no novel classes")]
    AllMasked,
    #[error("contrastive loss needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("supervised contrastive loss needs at least 2 labeled items, got {0}")]
    NoLabeledItems(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid class distribution: {0}")]
    InvalidDistribution(String),
    #[error("no unlabeled records")]
    NoUnlabeled,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Self-supervised contrastive temperature.
    pub tau_u: f64,
    /// Supervised contrastive temperature.
    pub tau_c: f64,
    /// Student softmax temperature.
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    pub tau_t_step_every: usize,
    /// Weight of the labeled terms; unlabeled terms get `1 - lambda`.
    pub lambda: f64,
    /// Weight of the mean-entropy regularizer.
    pub mu: f64,
    pub plc_threshold: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau_u: 0.07,
            tau_c: 1.0,
            tau_s: 0.1,
            tau_t_start: 0.07,
            tau_t_end: 0.04,
            tau_t_warmup_epochs: 40,
            tau_t_step_every: 4,
            lambda: 0.3,
            mu: 4.0,
            plc_threshold: 0.5,
            batch_size: 32,
            epochs: 50,
            learning_rate: 0.003,
            momentum: 0.9,
            weight_decay: 0.0,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        let temps = [self.tau_u, self.tau_c, self.tau_s, self.tau_t_start, self.tau_t_end];
        if temps.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("temperatures must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.plc_threshold) {
            return bad("plc_threshold must be in [0, 1]");
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return bad("mu must be finite and >= 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.tau_t_step_every == 0 {
            return bad("tau_t_step_every must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("learning_rate > 0, momentum in [0, 1) and weight_decay >= 0 required");
        }
        Ok(())
    }
}

/// A probability vector over known classes followed by novel classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> ClassDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self, TrainError> {
        if probs.is_empty() {
            return Err(TrainError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(TrainError::InvalidDistribution("entries must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().map(|p| p.as_f64()).sum();
        if (sum - 1.0).abs() > Self::tolerance(probs.len()) {
            return Err(TrainError::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Sum-to-one slack scaled by the scalar's precision.
    pub fn tolerance(len: usize) -> f64 {
        (T::epsilon().as_f64() * 16.0 * len as f64).max(1e-12)
    }

    pub fn uniform(len: usize) -> Self {
        Self { probs: vec![T::of(1.0 / len as f64); len] }
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![T::zero(); len];
        probs[index] = T::one();
        Self { probs }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<T> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn cast<U: Scalar>(&self) -> ClassDistribution<U> {
        ClassDistribution { probs: self.probs.iter().map(|p| U::of(p.as_f64())).collect() }
    }
}
