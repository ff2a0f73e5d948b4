//! Acceptance suite. Runs every criterion at its stated tolerance, prints
//! one PASS/FAIL line each and exits nonzero if any fails.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mebinncd::crop::SubImageRecord;
use mebinncd::mebin::{
    binarize, compute_threshold_range, detected_threshold_range, Binarizer, MebinConfig, FIXED_THRESHOLD_SWEEP,
};
use mebinncd::merge::area_weights;
use mebinncd::metrics::{ari, detection_rates, hungarian_match, nmi};
use mebinncd::mgvit::{MaskVector, MgVit, ModelConfig};
use mebinncd::ncdtrain::{
    augment, batch_objective, check_gradients, correct_pseudo_label, pseudo_label, AugmentConfig, BatchItem,
    ClassDistribution, EpochStats, TrainConfig,
};
use mebinncd::pipeline::{read_jsonl, run_pipeline, PipelineConfig, PipelinePaths, PipelineReport};
use mebinncd::raster::{connected_components, AnomalyMap, BinaryMask, BoundingBox, Connectivity, GrayImage};
use mebinncd::synth::{generate, write_corpus, NoiseConfig, SynthConfig};
use mebinncd::MergeStrategy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Shared state: the end-to-end runs feed the training-health check.
#[derive(Default)]
struct Runs {
    histories: Vec<(String, Vec<EpochStats>)>,
}

fn corpus_dir(root: &Path, name: &str, cfg: &SynthConfig) -> PathBuf {
    let dir = root.join(name);
    write_corpus(&generate(cfg).expect("corpus generates"), &dir).expect("corpus writes");
    dir
}

// 1. noise-free recovery
fn mebin_noise_free() -> Outcome {
    let cfg = SynthConfig { num_unlabeled: 60, num_labeled: 40, noise: NoiseConfig::none(), seed: 0, ..SynthConfig::default() };
    let corpus = generate(&cfg).unwrap();
    let maps: Vec<AnomalyMap> = corpus.images.iter().map(|i| i.map.clone()).collect();
    let mc = MebinConfig::default();
    let start = Instant::now();
    let range = compute_threshold_range(&maps).unwrap();
    let masks: Vec<BinaryMask> = maps.iter().map(|m| binarize(m, &range, &mc).unwrap().mask).collect();
    let secs = start.elapsed().as_secs_f64();
    let (mut regions, mut min_iou, mut missed, mut spurious) = (0, 1.0f64, 0, 0);
    for (img, pred) in corpus.images.iter().zip(&masks) {
        let gt = connected_components(&img.gt_mask, Connectivity::Eight);
        let pr = connected_components(pred, Connectivity::Eight);
        let gt_masks: Vec<BinaryMask> = (1..=gt.count).map(|k| gt.component_mask(k)).collect();
        let pr_masks: Vec<BinaryMask> = (1..=pr.count).map(|k| pr.component_mask(k)).collect();
        for g in &gt_masks {
            regions += 1;
            let best = pr_masks.iter().map(|p| g.iou(p)).fold(0.0, f64::max);
            min_iou = min_iou.min(best);
            missed += usize::from(best < 0.95);
        }
        for p in &pr_masks {
            spurious += usize::from(gt_masks.iter().all(|g| g.iou(p) < 0.95));
        }
    }
    outcome(
        missed == 0 && spurious == 0 && secs < 10.0,
        format!("{regions} GT regions in {} images, min IoU {min_iou:.4}, {missed} below 0.95, {spurious} spurious, {secs:.2} s", corpus.images.len()),
    )
}

// 2. MEBin against fixed thresholds and Otsu
fn mebin_vs_baselines() -> Outcome {
    let cfg = SynthConfig { num_unlabeled: 120, num_labeled: 80, seed: 0, ..SynthConfig::default() };
    let corpus = generate(&cfg).unwrap();
    let maps: Vec<AnomalyMap> = corpus.images.iter().map(|i| i.map.clone()).collect();
    let gts: Vec<BinaryMask> = corpus.images.iter().map(|i| i.gt_mask.clone()).collect();
    let mc = MebinConfig::default();
    let range = detected_threshold_range(&maps).unwrap();
    let rates = |b: Binarizer| {
        let preds: Vec<BinaryMask> = maps.iter().map(|m| b.apply(m, &range, &mc).unwrap()).collect();
        let r = detection_rates(&gts, &preds, Connectivity::Eight).unwrap();
        (r.fpr, r.fnr)
    };
    let (fpr, fnr) = rates(Binarizer::Mebin);
    let ours = fpr + fnr;
    let mut rows = vec![format!("mebin {fpr:.3}/{fnr:.3}")];
    let mut best_fixed = (f64::INFINITY, 0.0);
    for &e in FIXED_THRESHOLD_SWEEP.iter() {
        let (p, n) = rates(Binarizer::Fixed(e));
        rows.push(format!("eps={e} {p:.3}/{n:.3}"));
        if p + n < best_fixed.0 {
            best_fixed = (p + n, e);
        }
    }
    let (op, on) = rates(Binarizer::Otsu);
    rows.push(format!("otsu {op:.3}/{on:.3}"));
    let pass = ours <= best_fixed.0 && ours <= op + on && fnr <= 0.10 && fpr <= 0.25;
    outcome(
        pass,
        format!(
            "FPR+FNR mebin {ours:.3}, best fixed {:.3} (eps={}), otsu {:.3}; FPR/FNR: {}",
            best_fixed.0,
            best_fixed.1,
            op + on,
            rows.join(", ")
        ),
    )
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> GrayImage {
    let data = (0..side * side).map(|_| rng.random::<u8>()).collect();
    GrayImage::new(side, side, data).unwrap()
}

// 3. open mask is neutral
fn mask_neutrality() -> Outcome {
    let cfg = ModelConfig::default();
    let model = MgVit::<f64>::new(cfg.clone()).unwrap();
    let plain = model.with_masked_layers(0).unwrap();
    let open = MaskVector::open(cfg.num_patches());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let img = random_image(&mut rng, cfg.input_side);
        let a = model.forward(&img, &open).unwrap();
        let b = plain.forward(&img, &open).unwrap();
        let pairs = a.cls.iter().zip(&b.cls)
            .chain(a.projection.iter().zip(&b.projection))
            .chain(a.logits.iter().flatten().zip(b.logits.iter().flatten()));
        for (x, y) in pairs {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(worst <= 1e-9, format!("100 inputs, max abs difference {worst:e}"))
}

// 4. gradient check of the full objective
fn gradient_check() -> Outcome {
    let cfg = ModelConfig {
        input_side: 8,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        masked_layers: 1,
        projection_hidden: 8,
        projection_dim: 4,
        mlp_hidden: 16,
        seed: 11,
        ..ModelConfig::default()
    };
    let record = |i: usize, label: Option<usize>, score: f64| SubImageRecord {
        image_id: format!("g{i}"),
        region_index: 1,
        sub_image: GrayImage::from_fn(8, 8, |x, y| ((x * 29 + y * 13 + i * 71) % 256) as u8),
        sub_mask: BinaryMask::from_fn(8, 8, |x, y| (x + i) % 8 < 5 && y < 6),
        anomaly_score: score,
        area: 30,
        crop_box: BoundingBox { min_x: 0, min_y: 0, max_x: 7, max_y: 7 },
        label,
    };
    let recs = [record(0, Some(1), 0.9), record(1, Some(1), 0.8), record(2, None, 0.3), record(3, None, 0.95)];
    let items: Vec<BatchItem> = recs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (view_a, view_b) = augment(r, 100 + i as u64, &AugmentConfig::default());
            BatchItem { record: i, view_a, view_b, label: r.label, anomaly_score: r.anomaly_score }
        })
        .collect();
    let model = MgVit::<f64>::new(cfg).unwrap();
    let train = TrainConfig::default();
    let start = Instant::now();
    let parts = batch_objective(&model, &items, &train, 0.07, None, false).unwrap().parts;
    let all_active = parts.rep > 0.0
        && parts.rep_labeled > 0.0
        && parts.cls_labeled > 0.0
        && parts.cls_unlabeled > 0.0
        && parts.entropy > 0.0;
    let report = check_gradients(&model, &items, &train, 0.07, 1e-4, 1e-6).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        all_active && report.max_rel_error < 1e-4 && secs < 60.0,
        format!(
            "{} parameters, max relative error {:.2e} ({} [{}]), all terms active: {all_active}, {secs:.1} s",
            report.checked, report.max_rel_error, report.worst_tensor, report.worst_index
        ),
    )
}

// 5. pseudo-label and correction contracts
fn pseudo_labels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (num_known, k) = (2, 5);
    let (mut worst_sum, mut known_mass, mut identity_breaks, mut worst_normal) = (0.0f64, 0.0f64, 0, 0.0f64);
    for _ in 0..10_000 {
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
        let tau = rng.random_range(0.04..=0.07);
        let q = pseudo_label(&logits, num_known, tau).unwrap();
        worst_sum = worst_sum.max((q.probs().iter().sum::<f64>() - 1.0).abs());
        known_mass = known_mass.max(q.probs()[..num_known].iter().fold(0.0, |a, &b| a.max(b)));
        let s = rng.random_range(0.5..=1.0);
        if correct_pseudo_label(&q, s, num_known, 0.5).unwrap() != q {
            identity_breaks += 1;
        }
        let c: ClassDistribution<f64> = correct_pseudo_label(&q, 0.0, num_known, 0.5).unwrap();
        for (i, (&cv, &qv)) in c.probs().iter().zip(q.probs()).enumerate() {
            let want = 0.5 * qv + if i == num_known { 0.5 } else { 0.0 };
            worst_normal = worst_normal.max((cv - want).abs());
        }
    }
    outcome(
        known_mass == 0.0 && worst_sum <= 1e-9 && identity_breaks == 0 && worst_normal <= 1e-12,
        format!(
            "10000 logits: known mass {known_mass}, max |sum-1| {worst_sum:.1e}, identity breaks for s>=0.5: {identity_breaks}, s=0 deviation from 0.5 q + 0.5 e {worst_normal:.1e}"
        ),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn ari_pairs(t: &[usize], p: &[usize]) -> f64 {
    let n = t.len();
    let (mut both, mut same_t, mut same_p, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1.0;
            let (st, sp) = (t[i] == t[j], p[i] == p[j]);
            same_t += f64::from(u8::from(st));
            same_p += f64::from(u8::from(sp));
            both += f64::from(u8::from(st && sp));
        }
    }
    let expected = same_t * same_p / pairs;
    let max = (same_t + same_p) / 2.0;
    if max == expected {
        1.0
    } else {
        (both - expected) / (max - expected)
    }
}

fn nmi_contingency(t: &[usize], p: &[usize]) -> f64 {
    let n = t.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut mt: HashMap<usize, f64> = HashMap::new();
    let mut mp: HashMap<usize, f64> = HashMap::new();
    for (&a, &b) in t.iter().zip(p) {
        *joint.entry((a, b)).or_default() += 1.0;
        *mt.entry(a).or_default() += 1.0;
        *mp.entry(b).or_default() += 1.0;
    }
    match (mt.len() == 1, mp.len() == 1) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let h = |m: &HashMap<usize, f64>| -m.values().map(|c| c / n * (c / n).ln()).sum::<f64>();
    let mi: f64 = joint.iter().map(|(&(a, b), &c)| c / n * (c * n / (mt[&a] * mp[&b])).ln()).sum();
    mi / ((h(&mt) + h(&mp)) / 2.0)
}

// 6. metric oracles
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut nmi_err, mut ari_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let (kt, kp) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
        nmi_err = nmi_err.max((nmi(&t, &p).unwrap() - nmi_contingency(&t, &p)).abs());
        ari_err = ari_err.max((ari(&t, &p).unwrap() - ari_pairs(&t, &p)).abs());
    }
    let perms: Vec<Vec<Vec<usize>>> = (0..=7).map(permutations).collect();
    let mut hung_err = 0.0f64;
    for i in 0..1000 {
        let k = 1 + i % 7;
        let cost: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(-100.0..100.0)).collect()).collect();
        let best = perms[k]
            .iter()
            .map(|perm| perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        hung_err = hung_err.max((hungarian_match(&cost).unwrap().total_cost - best).abs());
    }
    outcome(
        nmi_err <= 1e-12 && ari_err <= 1e-12 && hung_err <= 1e-9,
        format!("max |NMI - oracle| {nmi_err:.1e}, max |ARI - oracle| {ari_err:.1e}, max Hungarian cost gap {hung_err:.1e} over K<=7"),
    )
}

// 7. region-merging weights
fn merging_properties() -> Outcome {
    let example = area_weights(&[400, 25], 100.0).unwrap()[0];
    let exact = 1.0 / (1.0 + (-0.15f64).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut sum_err, mut order_breaks) = (0.0f64, 0);
    for _ in 0..1000 {
        let m = rng.random_range(1..=8);
        let areas: Vec<usize> = (0..m).map(|_| rng.random_range(1..=4096)).collect();
        let tau = rng.random_range(1.0..200.0);
        let w = area_weights(&areas, tau).unwrap();
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        for i in 0..m {
            for j in 0..m {
                if areas[i] > areas[j] && w[i] <= w[j] {
                    order_breaks += 1;
                }
            }
        }
    }
    outcome(
        (example - exact).abs() <= 1e-6 && sum_err <= 1e-12 && order_breaks == 0,
        format!("example alpha_1 = {example:.7} (exact {exact:.7}), max |sum-1| {sum_err:.1e}, monotonicity violations {order_breaks}"),
    )
}

// 8. end-to-end at desk scale
fn end_to_end(root: &Path, corpus: &Path, runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let mut cfg = PipelineConfig::new(PipelinePaths::corpus(corpus));
    cfg.strategy = MergeStrategy::Area;
    let out = root.join("e2e");
    let area = run_pipeline(&cfg, &out).unwrap();
    cfg.strategy = MergeStrategy::Avg;
    let avg = run_pipeline(&cfg, &out).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let same_model = area.report.stages["train"] == avg.report.stages["train"];
    runs.histories.push(("end-to-end".into(), area.history.clone()));
    let (a, v) = (&area.report.clustering, &avg.report.clustering);
    outcome(
        a.f1 >= 0.80 && a.nmi >= 0.5 && a.f1 >= v.f1 && same_model && secs < 600.0,
        format!(
            "area merge F1 {:.3} NMI {:.3} ARI {:.3}; averaging F1 {:.3} NMI {:.3}; same model: {same_model}; detection FPR {:.3} FNR {:.3}; {secs:.0} s",
            a.f1, a.nmi, a.ari, v.f1, v.nmi, area.report.detection.fpr, area.report.detection.fnr
        ),
    )
}

// 9. byte-identical reruns through the binary
fn determinism(root: &Path, corpus: &Path, runs: &mut Runs) -> Outcome {
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(format!("replay-{run}"));
        let status = Command::new(env!("CARGO_BIN_EXE_mebinncd"))
            .args(["pipeline", "--jobs", "1", "--seed", "0", "--corpus"])
            .arg(corpus)
            .arg("--out")
            .arg(&out)
            .env("MEBINNCD_LOG", "warn")
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "pipeline run {run} failed");
        let report: PipelineReport = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
        let history: Vec<EpochStats> =
            read_jsonl(&out.join("stages").join(&report.stages["train"]).join("history.jsonl")).unwrap();
        runs.histories.push((format!("replay {run}"), history));
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    let same = reports[0] == reports[1];
    outcome(same, format!("two `pipeline --jobs 1` runs, report.json {} bytes, identical: {same}", reports[0].len()))
}

// 10. training health over every run above
fn training_health(runs: &Runs) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = !runs.histories.is_empty();
    for (name, h) in &runs.histories {
        let finite = h.iter().all(|e| {
            let p = &e.mean;
            [p.total, p.rep, p.rep_labeled, p.cls_labeled, p.cls_unlabeled, p.entropy].iter().all(|v| v.is_finite())
                && p.head_losses.iter().all(|v| v.is_finite())
        });
        let (first, last) = (h.first().map(|e| e.mean.total), h.last().map(|e| e.mean.total));
        let ok = finite && matches!((first, last), (Some(f), Some(l)) if l < f);
        pass &= ok;
        notes.push(format!("{name}: {:.3} -> {:.3} over {} epochs, finite {finite}", first.unwrap_or(f64::NAN), last.unwrap_or(f64::NAN), h.len()));
    }
    outcome(pass, notes.join("; "))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let e2e_cfg = SynthConfig { num_unlabeled: 60, num_labeled: 40, seed: 0, ..SynthConfig::default() };
    let corpus = corpus_dir(root, "corpus", &e2e_cfg);
    let mut runs = Runs::default();

    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut run = |n: u8, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        println!("criterion {n:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    run(1, "MEBin noise-free recovery", &mut mebin_noise_free);
    run(2, "MEBin vs fixed thresholds and Otsu", &mut mebin_vs_baselines);
    run(3, "mask neutrality", &mut mask_neutrality);
    run(4, "gradient check", &mut gradient_check);
    run(5, "pseudo-label contracts", &mut pseudo_labels);
    run(6, "metric oracles", &mut metric_oracles);
    run(7, "region-merging properties", &mut merging_properties);
    run(8, "end-to-end discovery", &mut || end_to_end(root, &corpus, &mut runs));
    run(9, "determinism", &mut || determinism(root, &corpus, &mut runs));
    run(10, "training health", &mut || training_health(&runs));

    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("acceptance: failing criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
