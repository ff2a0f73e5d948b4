//! Loss terms. The graph builders are what training differentiates; the
//! public functions evaluate the same builders on constant inputs.

use super::{ClassDistribution, TrainError};
use crate::autograd::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Mat;

const ENTROPY_EPS: f64 = 1e-12;

/// `-mean_j log softmax_n(zhat_j · ztilde_n / tau)[j]`; the positive pair
/// sits in the denominator alongside every other pair's view.
pub(crate) fn contrastive_self<T: Scalar>(g: &mut Graph<T>, zhat: Var, ztilde: Var, tau: f64) -> Var {
    let b = g.value(zhat).rows();
    let sim = g.matmul_t(zhat, ztilde);
    let sim = g.scale(sim, T::of(1.0 / tau));
    let logp = g.log_softmax_rows(sim);
    let diag = g.constant(Mat::from_fn(b, b, |i, j| if i == j { T::of(-1.0 / b as f64) } else { T::zero() }));
    let picked = g.mul(logp, diag);
    g.sum_all(picked)
}

/// Supervised contrastive term: for each item, the mean over other items
/// sharing its label of `-log softmax`, averaged over items that have at
/// least one such partner. `None` when no item has a partner.
pub(crate) fn contrastive_supervised<T: Scalar>(
    g: &mut Graph<T>,
    zhat: Var,
    ztilde: Var,
    labels: &[usize],
    tau: f64,
) -> Option<Var> {
    let b = labels.len();
    let partners: Vec<usize> =
        (0..b).map(|j| (0..b).filter(|&p| p != j && labels[p] == labels[j]).count()).collect();
    let active = partners.iter().filter(|&&c| c > 0).count();
    if active == 0 {
        return None;
    }
    let weights = Mat::from_fn(b, b, |j, p| {
        if p != j && labels[p] == labels[j] {
            T::of(-1.0 / (partners[j] * active) as f64)
        } else {
            T::zero()
        }
    });
    let sim = g.matmul_t(zhat, ztilde);
    let sim = g.scale(sim, T::of(1.0 / tau));
    let logp = g.log_softmax_rows(sim);
    let w = g.constant(weights);
    let picked = g.mul(logp, w);
    Some(g.sum_all(picked))
}

/// `-sum(weights ⊙ logp)`; weights carry targets and normalisation.
pub(crate) fn weighted_nll<T: Scalar>(g: &mut Graph<T>, logp: Var, weights: Mat<T>) -> Var {
    let w = g.constant(weights.scale(T::of(-1.0)));
    let picked = g.mul(logp, w);
    g.sum_all(picked)
}

/// Entropy of the row-mean of `probs`.
pub(crate) fn mean_entropy<T: Scalar>(g: &mut Graph<T>, probs: Var) -> Var {
    let (n, k) = g.value(probs).shape();
    let total = g.sum_rows(probs);
    let mean = g.scale(total, T::of(1.0 / n as f64));
    let eps = g.constant(Mat::filled(1, k, T::of(ENTROPY_EPS)));
    let shifted = g.add(mean, eps);
    let log = g.log(shifted);
    let plogp = g.mul(mean, log);
    let s = g.sum_all(plogp);
    g.scale(s, T::of(-1.0))
}

fn check_pairs<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<(), TrainError> {
    if a.shape() != b.shape() {
        return Err(TrainError::Shape(format!("views {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn eval<T: Scalar>(build: impl FnOnce(&mut Graph<T>) -> Var) -> T {
    let mut g = Graph::no_grad();
    let v = build(&mut g);
    g.value(v).data()[0]
}

/// Self-supervised contrastive loss. Rows of `view_a` and `view_b` are the
/// two views' projections of the same items.
pub fn loss_contrastive_self<T: Scalar>(view_a: &Mat<T>, view_b: &Mat<T>, tau_u: f64) -> Result<T, TrainError> {
    check_pairs(view_a, view_b)?;
    if view_a.rows() < 2 {
        return Err(TrainError::BatchTooSmall(view_a.rows()));
    }
    Ok(eval(|g| {
        let a = g.constant(view_a.clone());
        let b = g.constant(view_b.clone());
        contrastive_self(g, b, a, tau_u)
    }))
}

/// Supervised contrastive loss over labeled items; zero when no item has a
/// same-label partner.
pub fn loss_contrastive_supervised<T: Scalar>(
    view_a: &Mat<T>,
    view_b: &Mat<T>,
    labels: &[usize],
    tau_c: f64,
) -> Result<T, TrainError> {
    check_pairs(view_a, view_b)?;
    if labels.len() != view_a.rows() {
        return Err(TrainError::Shape(format!("{} labels for {} items", labels.len(), view_a.rows())));
    }
    if labels.len() < 2 {
        return Err(TrainError::NoLabeledItems(labels.len()));
    }
    Ok(eval(|g| {
        let a = g.constant(view_a.clone());
        let b = g.constant(view_b.clone());
        contrastive_supervised(g, b, a, labels, tau_c).unwrap_or_else(|| g.constant(Mat::zeros(1, 1)))
    }))
}

fn cross_entropy<T: Scalar>(target: &ClassDistribution<T>, pred: &ClassDistribution<T>) -> f64 {
    target
        .probs()
        .iter()
        .zip(pred.probs())
        .filter(|(t, _)| **t > T::zero())
        .map(|(t, p)| -t.as_f64() * p.as_f64().ln())
        .sum()
}

/// Mean cross-entropy over every (item, view). With `swap` each view's
/// prediction is scored against the other view's target.
pub fn loss_classification<T: Scalar>(
    student_a: &[ClassDistribution<T>],
    student_b: &[ClassDistribution<T>],
    targets_a: &[ClassDistribution<T>],
    targets_b: &[ClassDistribution<T>],
    swap: bool,
) -> Result<T, TrainError> {
    let n = student_a.len();
    if [student_b.len(), targets_a.len(), targets_b.len()].iter().any(|&m| m != n) || n == 0 {
        return Err(TrainError::Shape("classification batches must be non-empty and equal length".into()));
    }
    let (ta, tb) = if swap { (targets_b, targets_a) } else { (targets_a, targets_b) };
    let mut total = 0.0;
    for i in 0..n {
        total += cross_entropy(&ta[i], &student_a[i]) + cross_entropy(&tb[i], &student_b[i]);
    }
    Ok(T::of(total / (2 * n) as f64))
}

/// Entropy of the mean prediction across items and both views.
pub fn loss_regularizer<T: Scalar>(
    student_a: &[ClassDistribution<T>],
    student_b: &[ClassDistribution<T>],
) -> Result<T, TrainError> {
    let k = student_a.first().or(student_b.first()).map(|d| d.len()).ok_or_else(|| {
        TrainError::Shape("regularizer needs at least one prediction".into())
    })?;
    let rows: Vec<T> = student_a.iter().chain(student_b).flat_map(|d| d.probs().iter().copied()).collect();
    if !rows.len().is_multiple_of(k) {
        return Err(TrainError::Shape("predictions have differing lengths".into()));
    }
    let n = rows.len() / k;
    Ok(eval(|g| {
        let p = g.constant(Mat::from_vec(n, k, rows));
        mean_entropy(g, p)
    }))
}
