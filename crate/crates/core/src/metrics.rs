//! Clustering metrics after Hungarian matching, and region-level
//! detection rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{connected_components, BinaryMask, BoundingBox, Connectivity};

/// Bounding-box IoU a GT region must exceed to count as detected.
pub const DETECTION_IOU: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} labels")]
    TooShort(usize),
    #[error("cost matrix has a non-finite entry")]
    NonFiniteCost,
    #[error("cost matrix rows have differing lengths")]
    RaggedCost,
    #[error("image {index}: GT {gt:?} and prediction {pred:?} differ in size")]
    PairMismatch { index: usize, gt: (usize, usize), pred: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row, `None` when the row took a padding column.
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Minimum-cost assignment (Kuhn-Munkres with potentials, O(n^3)).
/// Rectangular inputs are padded to square with a constant larger than
/// every entry.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment, MetricsError> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != cols) {
        return Err(MetricsError::RaggedCost);
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteCost);
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment { row_to_col: vec![None; rows], total_cost: 0.0 });
    }
    let n = rows.max(cols);
    let pad = cost.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max).abs() + 1.0;
    let a = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { pad };

    // 1-based potentials u (rows), v (columns); p[j] = row matched to column j
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![None; rows];
    let mut total_cost = 0.0;
    for j in 1..=n {
        let (i, c) = (p[j] - 1, j - 1);
        if i < rows && c < cols {
            row_to_col[i] = Some(c);
            total_cost += cost[i][c];
        }
    }
    Ok(Assignment { row_to_col, total_cost })
}

/// Contingency counts with rows = predicted clusters and columns = true
/// classes, both relabelled densely in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub clusters: Vec<usize>,
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
}

impl Contingency {
    pub fn new(labels_true: &[usize], labels_pred: &[usize]) -> Result<Self, MetricsError> {
        if labels_true.len() != labels_pred.len() {
            return Err(MetricsError::LengthMismatch(labels_true.len(), labels_pred.len()));
        }
        let index = |xs: &[usize]| -> BTreeMap<usize, usize> {
            let mut m = BTreeMap::new();
            for &x in xs {
                m.entry(x).or_insert(0);
            }
            for (i, v) in m.values_mut().enumerate() {
                *v = i;
            }
            m
        };
        let ci = index(labels_pred);
        let ti = index(labels_true);
        let mut counts = vec![vec![0usize; ti.len()]; ci.len()];
        for (t, p) in labels_true.iter().zip(labels_pred) {
            counts[ci[p]][ti[t]] += 1;
        }
        Ok(Self { clusters: ci.into_keys().collect(), classes: ti.into_keys().collect(), counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        (0..self.classes.len()).map(|c| self.counts.iter().map(|r| r[c]).sum()).collect()
    }
}

fn entropy(sizes: &[usize], n: f64) -> f64 {
    sizes.iter().filter(|&&s| s > 0).map(|&s| {
        let p = s as f64 / n;
        -p * p.ln()
    }).sum()
}

/// Mutual information over the arithmetic mean of the two entropies.
/// Two constant partitions score 1; exactly one constant partition scores 0.
pub fn nmi(labels_true: &[usize], labels_pred: &[usize]) -> Result<f64, MetricsError> {
    let c = Contingency::new(labels_true, labels_pred)?;
    if labels_true.is_empty() {
        return Err(MetricsError::TooShort(1));
    }
    let n = c.total() as f64;
    let (rs, cs) = (c.cluster_sizes(), c.class_sizes());
    let (hp, ht) = (entropy(&rs, n), entropy(&cs, n));
    if rs.len() == 1 && cs.len() == 1 {
        return Ok(1.0);
    }
    if rs.len() == 1 || cs.len() == 1 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in c.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (rs[i] as f64 * cs[j] as f64)).ln();
            }
        }
    }
    Ok((mi / ((hp + ht) / 2.0)).clamp(0.0, 1.0))
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index; 1 when the chance-corrected denominator vanishes.
pub fn ari(labels_true: &[usize], labels_pred: &[usize]) -> Result<f64, MetricsError> {
    let c = Contingency::new(labels_true, labels_pred)?;
    if labels_true.len() < 2 {
        return Err(MetricsError::TooShort(2));
    }
    let index: f64 = c.counts.iter().flatten().map(|&v| comb2(v)).sum();
    let a: f64 = c.cluster_sizes().iter().map(|&v| comb2(v)).sum();
    let b: f64 = c.class_sizes().iter().map(|&v| comb2(v)).sum();
    let expected = a * b / comb2(c.total());
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedF1 {
    /// Unweighted mean over true classes.
    pub macro_f1: f64,
    /// Matched accuracy.
    pub micro_f1: f64,
    /// `(cluster, class)` pairs in original label values.
    pub mapping: Vec<(usize, usize)>,
}

/// Matches clusters to classes maximising total overlap, then scores F1
/// per true class; unmatched classes score 0.
pub fn matched_f1(labels_true: &[usize], labels_pred: &[usize]) -> Result<MatchedF1, MetricsError> {
    let c = Contingency::new(labels_true, labels_pred)?;
    if labels_true.is_empty() {
        return Err(MetricsError::TooShort(1));
    }
    let cost: Vec<Vec<f64>> = c.counts.iter().map(|r| r.iter().map(|&v| -(v as f64)).collect()).collect();
    let assign = hungarian_match(&cost)?;
    let (rs, cs) = (c.cluster_sizes(), c.class_sizes());
    let mut per_class = vec![0.0; c.classes.len()];
    let mut mapping = Vec::new();
    let mut matched = 0usize;
    for (k, col) in assign.row_to_col.iter().enumerate() {
        if let Some(j) = *col {
            mapping.push((c.clusters[k], c.classes[j]));
            let tp = c.counts[k][j];
            matched += tp;
            if tp > 0 {
                let p = tp as f64 / rs[k] as f64;
                let r = tp as f64 / cs[j] as f64;
                per_class[j] = 2.0 * p * r / (p + r);
            }
        }
    }
    Ok(MatchedF1 {
        macro_f1: per_class.iter().sum::<f64>() / per_class.len() as f64,
        micro_f1: matched as f64 / c.total() as f64,
        mapping,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub nmi: f64,
    pub ari: f64,
    /// Macro F1 unless the micro variant was requested.
    pub f1: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub mapping: Vec<(usize, usize)>,
    pub confusion: Contingency,
}

pub fn clustering_report(
    labels_true: &[usize],
    labels_pred: &[usize],
    micro_f1: bool,
) -> Result<ClusteringReport, MetricsError> {
    let f = matched_f1(labels_true, labels_pred)?;
    Ok(ClusteringReport {
        nmi: nmi(labels_true, labels_pred)?,
        ari: ari(labels_true, labels_pred)?,
        f1: if micro_f1 { f.micro_f1 } else { f.macro_f1 },
        f1_macro: f.macro_f1,
        f1_micro: f.micro_f1,
        mapping: f.mapping,
        confusion: Contingency::new(labels_true, labels_pred)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMatch {
    pub image: usize,
    pub gt_region: usize,
    pub pred_region: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Mean over images of false-positive predicted regions / predicted
    /// regions (0 for an image without predictions).
    pub fpr: f64,
    /// Mean over images with GT regions of missed GT / GT regions.
    pub fnr: f64,
    pub gt_regions: usize,
    pub pred_regions: usize,
    /// Best-IoU predicted box for every detected GT region.
    pub matches: Vec<RegionMatch>,
}

/// Per-image rates from region boxes: `(fpr, fnr or None without GT, matches)`.
pub fn image_detection(gt: &[BoundingBox], pred: &[BoundingBox]) -> (f64, Option<f64>, Vec<(usize, usize, f64)>) {
    let mut matches = Vec::new();
    let mut missed = 0;
    for (g, gb) in gt.iter().enumerate() {
        let best = pred.iter().enumerate().map(|(p, pb)| (p, gb.iou(pb))).fold(None, |acc: Option<(usize, f64)>, x| {
            match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            }
        });
        match best {
            Some((p, iou)) if iou > DETECTION_IOU => matches.push((g, p, iou)),
            _ => missed += 1,
        }
    }
    let false_pos = pred.iter().filter(|pb| gt.iter().all(|gb| gb.iou(pb) <= DETECTION_IOU)).count();
    let fpr = if pred.is_empty() { 0.0 } else { false_pos as f64 / pred.len() as f64 };
    let fnr = if gt.is_empty() { None } else { Some(missed as f64 / gt.len() as f64) };
    (fpr, fnr, matches)
}

/// Region-level FPR/FNR over paired GT and predicted masks.
pub fn detection_rates(
    gt_masks: &[BinaryMask],
    pred_masks: &[BinaryMask],
    connectivity: Connectivity,
) -> Result<DetectionReport, MetricsError> {
    if gt_masks.len() != pred_masks.len() {
        return Err(MetricsError::LengthMismatch(gt_masks.len(), pred_masks.len()));
    }
    let mut fpr_sum = 0.0;
    let mut fnr_sum = 0.0;
    let mut with_gt = 0usize;
    let mut report = DetectionReport { fpr: 0.0, fnr: 0.0, gt_regions: 0, pred_regions: 0, matches: Vec::new() };
    for (index, (g, p)) in gt_masks.iter().zip(pred_masks).enumerate() {
        if (g.width(), g.height()) != (p.width(), p.height()) {
            return Err(MetricsError::PairMismatch {
                index,
                gt: (g.width(), g.height()),
                pred: (p.width(), p.height()),
            });
        }
        let gb = connected_components(g, connectivity).boxes;
        let pb = connected_components(p, connectivity).boxes;
        report.gt_regions += gb.len();
        report.pred_regions += pb.len();
        let (fpr, fnr, matches) = image_detection(&gb, &pb);
        fpr_sum += fpr;
        if let Some(f) = fnr {
            fnr_sum += f;
            with_gt += 1;
        }
        report.matches.extend(matches.into_iter().map(|(gt_region, pred_region, iou)| RegionMatch {
            image: index,
            gt_region: gt_region + 1,
            pred_region: pred_region + 1,
            iou,
        }));
    }
    if !gt_masks.is_empty() {
        report.fpr = fpr_sum / gt_masks.len() as f64;
    }
    if with_gt > 0 {
        report.fnr = fnr_sum / with_gt as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_identity_and_rectangular() {
        let c = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.row_to_col, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(a.total_cost, 0.0);
        let wide = vec![vec![5.0, 1.0, 3.0], vec![2.0, 9.0, 0.5]];
        let a = hungarian_match(&wide).unwrap();
        assert_eq!(a.row_to_col, vec![Some(1), Some(2)]);
        assert_eq!(a.total_cost, 1.5);
        let tall = vec![vec![4.0], vec![1.0], vec![3.0]];
        assert_eq!(hungarian_match(&tall).unwrap().row_to_col, vec![None, Some(0), None]);
        assert_eq!(hungarian_match(&[vec![f64::NAN]]).unwrap_err(), MetricsError::NonFiniteCost);
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 2], &[5, 5, 3, 9]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 1, 0, 1], &[2, 2, 2, 2]).unwrap(), 0.0);
        // contingency [[1,0],[1,2]] for pred rows {0,1}, true cols {0,1}
        let got = nmi(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let ln = f64::ln;
        let mi = 0.25 * ln(4.0 * 1.0 / (1.0 * 2.0)) + 0.25 * ln(4.0 * 1.0 / (3.0 * 2.0)) + 0.5 * ln(4.0 * 2.0 / (3.0 * 2.0));
        let ht = ln(2.0);
        let hp = -(0.25 * ln(0.25) + 0.75 * ln(0.75));
        assert!((got - mi / ((ht + hp) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 1, 1, 2], &[3, 3, 0, 0, 7]).unwrap(), 1.0);
        assert!(ari(&[0], &[0]).is_err());
        assert!(matches!(ari(&[0, 1], &[0]), Err(MetricsError::LengthMismatch(2, 1))));
    }

    #[test]
    fn f1_examples() {
        let f = matched_f1(&[0, 0, 1, 1], &[4, 4, 4, 4]).unwrap();
        assert!((f.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(f.micro_f1, 0.5);
        let f = matched_f1(&[0, 1, 2, 2], &[7, 8, 9, 9]).unwrap();
        assert_eq!(f.macro_f1, 1.0);
        assert_eq!(f.mapping, vec![(7, 0), (8, 1), (9, 2)]);
    }

    fn rect(w: usize, h: usize, boxes: &[(usize, usize, usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| boxes.iter().any(|&(x0, y0, bw, bh)| x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh))
    }

    #[test]
    fn detection_examples() {
        let gt = rect(40, 40, &[(2, 2, 10, 10), (25, 25, 5, 5)]);
        let r = detection_rates(std::slice::from_ref(&gt), std::slice::from_ref(&gt), Connectivity::Eight).unwrap();
        assert_eq!((r.fpr, r.fnr, r.matches.len()), (0.0, 0.0, 2));
        let r = detection_rates(std::slice::from_ref(&gt), &[BinaryMask::zeros(40, 40)], Connectivity::Eight).unwrap();
        assert_eq!((r.fpr, r.fnr), (0.0, 1.0));

        let g = rect(40, 40, &[(0, 0, 10, 10)]);
        // 2 columns of overlap: IoU 20/180 = 0.111
        let hit = rect(40, 40, &[(8, 0, 10, 10)]);
        // 2x9 overlap: IoU 18/182 = 0.0989
        let miss = rect(40, 40, &[(8, 1, 10, 10)]);
        // exactly 0.1 is not enough
        let edge = rect(40, 40, &[(0, 0, 10, 1)]);
        let run = |p: &BinaryMask| detection_rates(std::slice::from_ref(&g), std::slice::from_ref(p), Connectivity::Eight).unwrap();
        assert_eq!((run(&hit).fnr, run(&hit).fpr), (0.0, 0.0));
        assert_eq!((run(&miss).fnr, run(&miss).fpr), (1.0, 1.0));
        assert_eq!(run(&edge).fnr, 1.0);

        // normal image: every prediction is a false positive; FNR ignores it
        let normal = BinaryMask::zeros(40, 40);
        let r = detection_rates(&[g.clone(), normal], &[g.clone(), rect(40, 40, &[(30, 30, 3, 3)])], Connectivity::Eight).unwrap();
        assert_eq!((r.fpr, r.fnr), (0.5, 0.0));
        assert!(detection_rates(&[g], &[BinaryMask::zeros(4, 4)], Connectivity::Eight).is_err());
    }
}
