use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, View};
use super::losses::{contrastive_self, contrastive_supervised, mean_entropy, weighted_nll};
use super::pseudo::{correct_pseudo_label, pseudo_label, teacher_temperature};
use super::{TrainConfig, TrainError};
use crate::autograd::{Graph, Var};
use crate::crop::{resize_to_model, SubImageRecord};
use crate::mgvit::{pool_mask, ForwardVars, MgVit, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Two augmented views of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    /// Position of the source record in the training set.
    pub record: usize,
    pub view_a: View,
    pub view_b: View,
    pub label: Option<usize>,
    pub anomaly_score: f64,
}

/// Corrected teacher targets for the unlabeled items of a batch, per
/// classifier head: `(targets for view a, targets for view b)`, one row per
/// unlabeled item in batch order. View a is supervised by view b's teacher
/// and vice versa.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTargets<T> {
    pub heads: Vec<(Mat<T>, Mat<T>)>,
}

/// Loss components of one batch. Classification and entropy terms are
/// averaged over classifier heads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub total: f64,
    pub rep: f64,
    pub rep_labeled: f64,
    pub cls_labeled: f64,
    pub cls_unlabeled: f64,
    pub entropy: f64,
    pub head_losses: Vec<f64>,
}

pub struct Objective<T> {
    pub parts: ObjectiveParts,
    pub grads: Option<Vec<Mat<T>>>,
    pub targets: PseudoTargets<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub tau_t: f64,
    pub steps: usize,
    #[serde(flatten)]
    pub mean: ObjectiveParts,
}

pub struct TrainOutcome<T> {
    pub model: MgVit<T>,
    pub inference_head: usize,
    pub history: Vec<EpochStats>,
}

struct ViewPass<T> {
    graph: Graph<T>,
    vars: ForwardVars,
}

fn forward_view<T: Scalar>(model: &MgVit<T>, view: &View, caching: bool) -> Result<ViewPass<T>, TrainError> {
    let mut graph = if caching { Graph::new() } else { Graph::no_grad() };
    let bound = model.bind(&mut graph);
    let mask = pool_mask(&view.mask, model.config())?;
    let vars = model.forward_vars(&mut graph, &bound, &view.image, &mask)?;
    Ok(ViewPass { graph, vars })
}

/// Resizes records to the model input side where needed.
pub fn prepare_items(records: &[SubImageRecord], side: usize) -> Vec<SubImageRecord> {
    records
        .iter()
        .map(|r| {
            if r.sub_image.width() == side && r.sub_image.height() == side && r.sub_mask.width() == side {
                r.clone()
            } else {
                resize_to_model(r, side)
            }
        })
        .collect()
}

fn stack<T: Scalar>(rows: impl Iterator<Item = Vec<T>>, cols: usize) -> Mat<T> {
    let data: Vec<T> = rows.flatten().collect();
    Mat::from_vec(data.len() / cols, cols, data)
}

fn teacher_targets<T: Scalar>(
    logits: &Mat<T>,
    items: &[&BatchItem],
    num_known: usize,
    tau_t: f64,
    cfg: &TrainConfig,
) -> Result<Mat<T>, TrainError> {
    let k = logits.cols();
    let mut out = Mat::zeros(items.len(), k);
    for (i, item) in items.iter().enumerate() {
        let q = pseudo_label(logits.row(i), num_known, tau_t)?;
        let q = correct_pseudo_label(&q, item.anomaly_score.clamp(0.0, 1.0), num_known, cfg.plc_threshold)?;
        out.row_mut(i).copy_from_slice(q.probs());
    }
    Ok(out)
}

/// Evaluates the batch objective, and optionally its parameter gradient.
///
/// Each view runs on its own tape; the loss is built on a separate tape
/// over the stacked view outputs, and its output cotangents are pushed
/// back through every view tape. Teacher targets are treated as constants;
/// pass `frozen` to reuse targets from an earlier evaluation.
pub fn batch_objective<T: Scalar>(
    model: &MgVit<T>,
    items: &[BatchItem],
    cfg: &TrainConfig,
    tau_t: f64,
    frozen: Option<&PseudoTargets<T>>,
    want_grads: bool,
) -> Result<Objective<T>, TrainError> {
    let mcfg = model.config();
    let num_known = mcfg.num_known_classes;
    let k = mcfg.num_classes();
    let heads = mcfg.num_heads_classifier;
    let pdim = mcfg.projection_dim;

    let mut ordered: Vec<&BatchItem> = items.iter().filter(|i| i.label.is_some()).collect();
    let nl = ordered.len();
    ordered.extend(items.iter().filter(|i| i.label.is_none()));
    let nb = ordered.len();
    let nu = nb - nl;
    if nb < 2 {
        return Err(TrainError::BatchTooSmall(nb));
    }

    let views: Vec<&View> = ordered.iter().flat_map(|i| [&i.view_a, &i.view_b]).collect();
    let mut passes: Vec<ViewPass<T>> =
        views.par_iter().map(|v| forward_view(model, v, want_grads)).collect::<Result<_, _>>()?;

    let out_rows = |side: usize, f: &dyn Fn(&ViewPass<T>) -> Var| -> Vec<Vec<T>> {
        (0..nb).map(|i| passes[2 * i + side].graph.value(f(&passes[2 * i + side])).data().to_vec()).collect()
    };
    let za = stack(out_rows(0, &|p| p.vars.projection).into_iter(), pdim);
    let zb = stack(out_rows(1, &|p| p.vars.projection).into_iter(), pdim);
    let logits_a: Vec<Mat<T>> = (0..heads).map(|h| stack(out_rows(0, &|p| p.vars.logits[h]).into_iter(), k)).collect();
    let logits_b: Vec<Mat<T>> = (0..heads).map(|h| stack(out_rows(1, &|p| p.vars.logits[h]).into_iter(), k)).collect();

    let unlabeled: Vec<&BatchItem> = ordered[nl..].to_vec();
    let targets = match frozen {
        Some(t) => t.clone(),
        None => {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let ua = Mat::from_fn(nu, k, |r, c| logits_a[h].get(nl + r, c));
                let ub = Mat::from_fn(nu, k, |r, c| logits_b[h].get(nl + r, c));
                let for_a = teacher_targets(&ub, &unlabeled, num_known, tau_t, cfg)?;
                let for_b = teacher_targets(&ua, &unlabeled, num_known, tau_t, cfg)?;
                per_head.push((for_a, for_b));
            }
            PseudoTargets { heads: per_head }
        }
    };
    if targets.heads.len() != heads || targets.heads.iter().any(|(a, b)| a.shape() != (nu, k) || b.shape() != (nu, k)) {
        return Err(TrainError::Shape("pseudo targets do not match the batch".into()));
    }

    let lambda = cfg.lambda;
    let mut g = if want_grads { Graph::new() } else { Graph::no_grad() };
    let za_v = g.constant(za);
    let zb_v = g.constant(zb);
    let la_v: Vec<Var> = logits_a.into_iter().map(|m| g.constant(m)).collect();
    let lb_v: Vec<Var> = logits_b.into_iter().map(|m| g.constant(m)).collect();

    let rep = contrastive_self(&mut g, zb_v, za_v, cfg.tau_u);
    let rep_l = if nl >= 2 {
        let labels: Vec<usize> = ordered[..nl].iter().map(|i| i.label.unwrap_or(0)).collect();
        let zbl = g.slice_rows(zb_v, 0, nl);
        let zal = g.slice_rows(za_v, 0, nl);
        contrastive_supervised(&mut g, zbl, zal, &labels, cfg.tau_c)
    } else {
        None
    };

    let inv_s = T::of(1.0 / cfg.tau_s);
    let mut head_vars = Vec::with_capacity(heads);
    let mut cls_l_vars = Vec::new();
    let mut cls_u_vars = Vec::new();
    let mut ent_vars = Vec::new();
    for h in 0..heads {
        let sa = g.scale(la_v[h], inv_s);
        let sb = g.scale(lb_v[h], inv_s);
        let logp_a = g.log_softmax_rows(sa);
        let logp_b = g.log_softmax_rows(sb);
        let mut terms: Vec<Var> = Vec::new();
        if nl > 0 {
            let w = Mat::from_fn(nb, k, |r, c| {
                if r < nl && ordered[r].label == Some(c) { T::of(1.0 / nl as f64) } else { T::zero() }
            });
            let a = weighted_nll(&mut g, logp_a, w.clone());
            let b = weighted_nll(&mut g, logp_b, w);
            let cls_l = g.add(a, b);
            cls_l_vars.push(cls_l);
            terms.push(g.scale(cls_l, T::of(lambda)));
        }
        if nu > 0 {
            let (ta, tb) = &targets.heads[h];
            let inv_u = T::of(1.0 / nu as f64);
            let wa = Mat::from_fn(nb, k, |r, c| if r >= nl { ta.get(r - nl, c) * inv_u } else { T::zero() });
            let wb = Mat::from_fn(nb, k, |r, c| if r >= nl { tb.get(r - nl, c) * inv_u } else { T::zero() });
            let a = weighted_nll(&mut g, logp_a, wa);
            let b = weighted_nll(&mut g, logp_b, wb);
            let cls_u = g.add(a, b);
            let pa = g.softmax_rows(sa);
            let pb = g.softmax_rows(sb);
            let pa = g.slice_rows(pa, nl, nu);
            let pb = g.slice_rows(pb, nl, nu);
            let both = g.concat_rows(&[pa, pb]);
            let ent = mean_entropy(&mut g, both);
            cls_u_vars.push(cls_u);
            ent_vars.push(ent);
            let reg = g.scale(ent, T::of(-cfg.mu));
            let u = g.add(cls_u, reg);
            terms.push(g.scale(u, T::of(1.0 - lambda)));
        }
        let mut head = terms[0];
        for &t in &terms[1..] {
            head = g.add(head, t);
        }
        head_vars.push(head);
    }

    let mut total = g.scale(rep, T::of(1.0 - lambda));
    if let Some(r) = rep_l {
        let r = g.scale(r, T::of(lambda));
        total = g.add(total, r);
    }
    let inv_h = T::of(1.0 / heads as f64);
    for &hv in &head_vars {
        let s = g.scale(hv, inv_h);
        total = g.add(total, s);
    }

    let val = |v: Var| g.value(v).data()[0].as_f64();
    let mean_of = |vs: &[Var]| if vs.is_empty() { 0.0 } else { vs.iter().map(|&v| val(v)).sum::<f64>() / vs.len() as f64 };
    let parts = ObjectiveParts {
        total: val(total),
        rep: val(rep),
        rep_labeled: rep_l.map(val).unwrap_or(0.0),
        cls_labeled: mean_of(&cls_l_vars),
        cls_unlabeled: mean_of(&cls_u_vars),
        entropy: mean_of(&ent_vars),
        head_losses: head_vars.iter().map(|&v| val(v)).collect(),
    };

    if !want_grads || !parts.total.is_finite() {
        return Ok(Objective { parts, grads: None, targets });
    }

    let lg = g.backward(total, Mat::filled(1, 1, T::one())).map_err(crate::mgvit::ModelError::from)?;
    let cot = |v: Var, rows: usize, cols: usize| lg.of(v).cloned().unwrap_or_else(|| Mat::zeros(rows, cols));
    let dza = cot(za_v, nb, pdim);
    let dzb = cot(zb_v, nb, pdim);
    let dla: Vec<Mat<T>> = la_v.iter().map(|&v| cot(v, nb, k)).collect();
    let dlb: Vec<Mat<T>> = lb_v.iter().map(|&v| cot(v, nb, k)).collect();

    let per_view: Vec<Vec<Mat<T>>> = passes
        .par_iter_mut()
        .enumerate()
        .map(|(vi, pass)| {
            let (item, side) = (vi / 2, vi % 2);
            let (dz, dl) = if side == 0 { (&dza, &dla) } else { (&dzb, &dlb) };
            let g = &mut pass.graph;
            let c = g.constant(Mat::row_vector(dz.row(item).to_vec()));
            let m = g.mul(pass.vars.projection, c);
            let mut root = g.sum_all(m);
            for (h, d) in dl.iter().enumerate() {
                let c = g.constant(Mat::row_vector(d.row(item).to_vec()));
                let m = g.mul(pass.vars.logits[h], c);
                let s = g.sum_all(m);
                root = g.add(root, s);
            }
            model.backward(g, root, Mat::filled(1, 1, T::one()))
        })
        .collect::<Result<_, _>>()?;

    let mut grads = per_view[0].clone();
    for vg in &per_view[1..] {
        for (acc, gr) in grads.iter_mut().zip(vg) {
            acc.add_assign(gr);
        }
    }
    Ok(Objective { parts, grads: Some(grads), targets })
}

fn check_inputs(records: &[SubImageRecord], mcfg: &ModelConfig, cfg: &TrainConfig) -> Result<(), TrainError> {
    cfg.validate()?;
    mcfg.validate()?;
    if mcfg.num_novel_classes < 2 {
        return Err(TrainError::ConfigMismatch("at least 2 novel classes required".into()));
    }
    if let Some(r) = records.iter().find(|r| r.label.is_some_and(|l| l >= mcfg.num_known_classes)) {
        return Err(TrainError::ConfigMismatch(format!(
            "record {}#{} has label {:?} but the model has {} known classes",
            r.image_id, r.region_index, r.label, mcfg.num_known_classes
        )));
    }
    if !records.iter().any(|r| r.label.is_none()) {
        return Err(TrainError::NoUnlabeled);
    }
    Ok(())
}

fn accumulate(acc: &mut ObjectiveParts, p: &ObjectiveParts) {
    acc.total += p.total;
    acc.rep += p.rep;
    acc.rep_labeled += p.rep_labeled;
    acc.cls_labeled += p.cls_labeled;
    acc.cls_unlabeled += p.cls_unlabeled;
    acc.entropy += p.entropy;
    if acc.head_losses.is_empty() {
        acc.head_losses = vec![0.0; p.head_losses.len()];
    }
    for (a, b) in acc.head_losses.iter_mut().zip(&p.head_losses) {
        *a += b;
    }
}

fn divide(acc: &mut ObjectiveParts, n: f64) {
    for v in [&mut acc.total, &mut acc.rep, &mut acc.rep_labeled, &mut acc.cls_labeled, &mut acc.cls_unlabeled, &mut acc.entropy] {
        *v /= n;
    }
    acc.head_losses.iter_mut().for_each(|v| *v /= n);
}

/// Trains a fresh model on labeled (`label = Some`) and unlabeled records
/// with SGD and momentum.
pub fn train<T: Scalar>(
    records: &[SubImageRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    check_inputs(records, model_cfg, cfg)?;
    let records = prepare_items(records, model_cfg.input_side);
    let mut model = MgVit::<T>::new(model_cfg.clone())?;
    let mut velocity: Vec<Mat<T>> =
        model.params().iter().map(|(_, t)| Mat::zeros(t.rows(), t.cols())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut cumulative = vec![0.0f64; model_cfg.num_heads_classifier];
    let (lr, mom, wd) = (T::of(cfg.learning_rate), T::of(cfg.momentum), T::of(cfg.weight_decay));

    for epoch in 0..cfg.epochs {
        let tau_t = teacher_temperature(cfg, epoch);
        order.shuffle(&mut rng);
        let mut acc = ObjectiveParts::default();
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let items: Vec<BatchItem> = chunk
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&ri, &seed)| {
                    let r = &records[ri];
                    let (view_a, view_b) = augment(r, seed, &cfg.augment);
                    BatchItem { record: ri, view_a, view_b, label: r.label, anomaly_score: r.anomaly_score }
                })
                .collect();
            let obj = batch_objective(&model, &items, cfg, tau_t, None, true)?;
            let grads = match obj.grads {
                Some(gr) if obj.parts.total.is_finite() && gr.iter().all(|m| m.is_finite()) => gr,
                _ => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!("{:?}", obj.parts),
                    })
                }
            };
            for (i, grad) in grads.iter().enumerate() {
                let p = model.params_mut().get_mut(i);
                let v = &mut velocity[i];
                for ((vv, &gv), pv) in v.data_mut().iter_mut().zip(grad.data()).zip(p.data_mut().iter_mut()) {
                    *vv = mom * *vv + gv + wd * *pv;
                    *pv = *pv - lr * *vv;
                }
            }
            accumulate(&mut acc, &obj.parts);
            steps += 1;
        }
        if steps > 0 {
            divide(&mut acc, steps as f64);
        }
        for (c, h) in cumulative.iter_mut().zip(&acc.head_losses) {
            *c += h;
        }
        log::info!(
            "epoch {epoch}: loss {:.4} rep {:.4} cls_l {:.4} cls_u {:.4} entropy {:.4}",
            acc.total,
            acc.rep,
            acc.cls_labeled,
            acc.cls_unlabeled,
            acc.entropy
        );
        history.push(EpochStats { epoch, tau_t, steps, mean: acc });
    }

    let mut inference_head = 0;
    for (h, c) in cumulative.iter().enumerate() {
        if *c < cumulative[inference_head] {
            inference_head = h;
        }
    }
    Ok(TrainOutcome { model, inference_head, history })
}
