//! Anomaly-map binarization, mask-guided novel anomaly class discovery
//! and clustering evaluation.
//!
//! The stages run in order: [`mebin`] turns anomaly maps into region
//! masks, [`crop`] cuts one square sub-image per region, [`ncdtrain`]
//! trains an [`mgvit`] model on labeled and unlabeled crops, [`merge`]
//! combines region predictions per image and [`metrics`] scores the
//! result. [`pipeline`] wires them together; [`synth`] generates test
//! corpora.

pub mod autograd;
pub mod crop;
pub mod mebin;
pub mod merge;
pub mod metrics;
pub mod mgvit;
pub mod ncdtrain;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use crop::{crop_regions, resize_to_model, CropConfig, SubImageRecord};
pub use mebin::{binarize, compute_threshold_range, Binarizer, MebinConfig, MebinResult, ThresholdRange};
pub use merge::{merge_baselines, merge_image, MergeConfig, MergeStrategy};
pub use metrics::{ari, detection_rates, hungarian_match, matched_f1, nmi, ClusteringReport, DetectionReport};
pub use mgvit::{pool_mask, MaskTarget, MaskVector, MgVit, ModelConfig};
pub use ncdtrain::{train, ClassDistribution, TrainConfig};
pub use pipeline::{ablation_sweep, run_pipeline, PipelineConfig, PipelineError, PipelinePaths, SweepAxis};
pub use raster::{AnomalyMap, BinaryMask, BoundingBox, Connectivity, GrayImage};
pub use scalar::Scalar;
pub use synth::{generate, SynthConfig};

pub type MgVit32 = MgVit<f32>;
pub type MgVit64 = MgVit<f64>;
pub type ClassDistribution32 = ClassDistribution<f32>;
pub type ClassDistribution64 = ClassDistribution<f64>;
