use serde::Serialize;

use super::train::{batch_objective, BatchItem};
use super::{TrainConfig, TrainError};
use crate::mgvit::MgVit;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares every parameter gradient of the batch objective against
/// fourth-order central differences with step `h`. Teacher targets are
/// frozen at the unperturbed parameters, matching how they enter the
/// gradient.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradients(
    model: &MgVit<f64>,
    items: &[BatchItem],
    cfg: &TrainConfig,
    tau_t: f64,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport, TrainError> {
    let base = batch_objective(model, items, cfg, tau_t, None, true)?;
    let grads = base.grads.ok_or_else(|| TrainError::NonFiniteLoss {
        epoch: 0,
        step: 0,
        detail: format!("{:?}", base.parts),
    })?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (t, grad) in grads.iter().enumerate() {
        for i in 0..grad.data().len() {
            let orig = probe.params().get(t).data()[i];
            let mut eval = |v: f64| -> Result<f64, TrainError> {
                probe.params_mut().get_mut(t).data_mut()[i] = v;
                Ok(batch_objective(&probe, items, cfg, tau_t, Some(&base.targets), false)?.parts.total)
            };
            let (p1, m1) = (eval(orig + h)?, eval(orig - h)?);
            let (p2, m2) = (eval(orig + 2.0 * h)?, eval(orig - 2.0 * h)?);
            eval(orig)?;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let analytic = grad.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_tensor.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_tensor = model.params().name(t).to_string();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
