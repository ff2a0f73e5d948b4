use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifacts::write_json;
use super::{run_with_cache, InStage, PipelineConfig, PipelineError, Stage};
use crate::mebin::{Binarizer, FIXED_THRESHOLD_SWEEP};
use crate::merge::MergeStrategy;
use crate::mgvit::MaskTarget;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Fixed thresholds, Otsu and MEBin.
    FixedThreshold,
    /// Number of mask-guided layers.
    MaskedLayers,
    MergeStrategy,
    PlcThreshold,
    MaskTarget,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::FixedThreshold,
        SweepAxis::MaskedLayers,
        SweepAxis::MergeStrategy,
        SweepAxis::PlcThreshold,
        SweepAxis::MaskTarget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::FixedThreshold => "fixed-threshold",
            SweepAxis::MaskedLayers => "masked-layers",
            SweepAxis::MergeStrategy => "merge-strategy",
            SweepAxis::PlcThreshold => "plc-threshold",
            SweepAxis::MaskTarget => "mask-target",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "l-m" && *a == SweepAxis::MaskedLayers))
            .ok_or_else(|| PipelineError::Invalid(format!("unknown sweep axis {s:?}")))
    }
}

/// One table row: the axis value and the metrics of its run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub fpr: f64,
    pub fnr: f64,
    pub nmi: f64,
    pub ari: f64,
    pub f1: f64,
    pub final_loss: f64,
}

/// The configurations of a sweep along `axis`, labelled by axis value.
pub fn sweep_variants(cfg: &PipelineConfig, axis: SweepAxis) -> Vec<(String, PipelineConfig)> {
    let with = |f: &dyn Fn(&mut PipelineConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match axis {
        SweepAxis::FixedThreshold => {
            let mut out: Vec<(String, PipelineConfig)> = FIXED_THRESHOLD_SWEEP
                .iter()
                .map(|&e| (format!("eps={e}"), with(&|c| c.binarizer = Binarizer::Fixed(e))))
                .collect();
            out.push(("otsu".into(), with(&|c| c.binarizer = Binarizer::Otsu)));
            out.push(("mebin".into(), with(&|c| c.binarizer = Binarizer::Mebin)));
            out
        }
        SweepAxis::MaskedLayers => {
            let l = cfg.model.num_layers;
            let mut depths = vec![1.min(l), l.div_ceil(4), l.div_ceil(2), (3 * l).div_ceil(4), l];
            depths.dedup();
            depths.into_iter().map(|d| (format!("L_m={d}"), with(&|c| c.model.masked_layers = d))).collect()
        }
        SweepAxis::MergeStrategy => MergeStrategy::ALL
            .into_iter()
            .map(|s| (s.name().to_string(), with(&|c| c.strategy = s)))
            .collect(),
        SweepAxis::PlcThreshold => [0.1, 0.3, 0.5, 0.7, 0.9]
            .into_iter()
            .map(|t| (format!("plc={t}"), with(&|c| c.train.plc_threshold = t)))
            .collect(),
        SweepAxis::MaskTarget => [
            ("all-tokens", MaskTarget::AllTokens),
            ("patch-tokens", MaskTarget::PatchTokens),
            ("class-token", MaskTarget::ClassToken),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), with(&|c| c.model.mask_target = t)))
        .collect(),
    }
}

/// Runs the pipeline once per value of `axis`, sharing one stage cache,
/// and writes `sweep.json` and `sweep.csv` into `out`. Each run's report
/// lands in `out/runs/<value>/report.json`.
pub fn ablation_sweep(cfg: &PipelineConfig, axis: SweepAxis, out: &Path) -> Result<Vec<SweepRow>, PipelineError> {
    let cache = out.join("stages");
    let mut rows = Vec::new();
    for (value, variant) in sweep_variants(cfg, axis) {
        log::info!("sweep {}: {value}", axis.name());
        let run_dir = out.join("runs").join(value.replace(['=', ' '], "_"));
        let outcome = run_with_cache(&variant, &cache, &run_dir)?;
        let r = &outcome.report;
        rows.push(SweepRow {
            axis: axis.name().to_string(),
            value,
            fpr: r.detection.fpr,
            fnr: r.detection.fnr,
            nmi: r.clustering.nmi,
            ari: r.clustering.ari,
            f1: r.clustering.f1,
            final_loss: r.training.final_epoch_loss,
        });
    }
    (|| -> Result<(), PipelineError> {
        fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
        write_json(&out.join("sweep.json"), &rows)?;
        let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| PipelineError::io(&out.join("sweep.csv"), e))
    })()
    .in_stage(Stage::Sweep)?;
    Ok(rows)
}
