use super::{ClassDistribution, TrainConfig, TrainError};
use crate::scalar::Scalar;

/// Teacher distribution: known-class logits are removed, the rest go
/// through a softmax at temperature `tau_t`.
pub fn pseudo_label<T: Scalar>(
    teacher_logits: &[T],
    num_known: usize,
    tau_t: f64,
) -> Result<ClassDistribution<T>, TrainError> {
    if !(tau_t > 0.0) {
        return Err(TrainError::InvalidConfig("tau_t must be > 0".into()));
    }
    if num_known >= teacher_logits.len() {
        return Err(TrainError::AllMasked);
    }
    let novel = &teacher_logits[num_known..];
    let scaled: Vec<f64> = novel.iter().map(|v| v.as_f64() / tau_t).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut probs = vec![T::zero(); num_known];
    probs.extend(exps.iter().map(|e| T::of(e / z)));
    ClassDistribution::new(probs)
}

/// Shifts `w = max(threshold - score, 0)` of the mass onto the normal slot,
/// the first class after the known ones.
pub fn correct_pseudo_label<T: Scalar>(
    q: &ClassDistribution<T>,
    anomaly_score: f64,
    num_known: usize,
    threshold: f64,
) -> Result<ClassDistribution<T>, TrainError> {
    if !(0.0..=1.0).contains(&anomaly_score) {
        return Err(TrainError::InvalidDistribution(format!("anomaly score {anomaly_score} outside [0, 1]")));
    }
    if num_known >= q.len() {
        return Err(TrainError::AllMasked);
    }
    let w = (threshold - anomaly_score).max(0.0);
    if w == 0.0 {
        return Ok(q.clone());
    }
    let keep = T::of(1.0 - w);
    let mut probs: Vec<T> = q.probs().iter().map(|&p| keep * p).collect();
    probs[num_known] = probs[num_known] + T::of(w);
    ClassDistribution::new(probs)
}

/// Teacher temperature for a zero-based epoch: equal steps every
/// `tau_t_step_every` epochs until the warmup ends, then `tau_t_end`.
pub fn teacher_temperature(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch >= cfg.tau_t_warmup_epochs {
        return cfg.tau_t_end;
    }
    let steps = cfg.tau_t_warmup_epochs.div_ceil(cfg.tau_t_step_every).max(1);
    let k = epoch / cfg.tau_t_step_every;
    cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * k as f64 / steps as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_novel_logits_split_evenly() {
        let q = pseudo_label(&[3.0f64, -1.0, 0.4, 0.4], 2, 0.07).unwrap();
        assert_eq!(q.probs()[0], 0.0);
        assert_eq!(q.probs()[1], 0.0);
        assert!((q.probs()[2] - 0.5).abs() < 1e-12);
        assert!(matches!(pseudo_label(&[1.0f64, 2.0], 2, 0.07), Err(TrainError::AllMasked)));
    }

    #[test]
    fn lower_temperature_sharpens() {
        let logits = [0.3f64, 0.9, 1.0, 0.0];
        let hot = pseudo_label(&logits, 2, 0.07).unwrap().probs()[2];
        let cold = pseudo_label(&logits, 2, 0.04).unwrap().probs()[2];
        let oracle = |t: f64| 1.0 / (1.0 + (-1.0 / t).exp());
        assert!((hot - oracle(0.07)).abs() < 1e-12);
        assert!((cold - oracle(0.04)).abs() < 1e-12);
        assert!(cold > hot);
    }

    #[test]
    fn correction_examples() {
        let q = ClassDistribution::<f64>::new(vec![0.0, 0.0, 0.1, 0.6, 0.3]).unwrap();
        assert_eq!(correct_pseudo_label(&q, 0.7, 2, 0.5).unwrap(), q);
        let r = correct_pseudo_label(&q, 0.0, 2, 0.5).unwrap();
        let want = [0.0, 0.0, 0.55, 0.3, 0.15];
        for (a, b) in r.probs().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let u = ClassDistribution::<f64>::uniform(4);
        let r = correct_pseudo_label(&u, 0.3, 0, 0.5).unwrap();
        for (a, b) in r.probs().iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_schedule() {
        let cfg = TrainConfig::default();
        let t: Vec<f64> = (0..50).map(|e| teacher_temperature(&cfg, e)).collect();
        assert_eq!(t[0], 0.07);
        assert!((t[4] - 0.067).abs() < 1e-12);
        assert!((t[39] - 0.043).abs() < 1e-12);
        assert_eq!(t[40], 0.04);
        assert_eq!(t[49], 0.04);
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }
}
