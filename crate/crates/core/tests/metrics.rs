use std::collections::HashMap;

use mebinncd::metrics::{ari, clustering_report, hungarian_match, matched_f1, nmi};
use proptest::prelude::*;

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

fn brute_min_cost(cost: &[Vec<f64>]) -> f64 {
    permutations(cost.len())
        .iter()
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

// pairs agreeing/disagreeing, counted one pair at a time
fn ari_oracle(t: &[usize], p: &[usize]) -> f64 {
    let n = t.len();
    let (mut both, mut same_t, mut same_p, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1.0;
            let st = t[i] == t[j];
            let sp = p[i] == p[j];
            if st {
                same_t += 1.0;
            }
            if sp {
                same_p += 1.0;
            }
            if st && sp {
                both += 1.0;
            }
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

fn nmi_oracle(t: &[usize], p: &[usize]) -> f64 {
    let n = t.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut mt: HashMap<usize, f64> = HashMap::new();
    let mut mp: HashMap<usize, f64> = HashMap::new();
    for (&a, &b) in t.iter().zip(p) {
        *joint.entry((a, b)).or_default() += 1.0 / n;
        *mt.entry(a).or_default() += 1.0 / n;
        *mp.entry(b).or_default() += 1.0 / n;
    }
    if mt.len() == 1 && mp.len() == 1 {
        return 1.0;
    }
    if mt.len() == 1 || mp.len() == 1 {
        return 0.0;
    }
    let h = |m: &HashMap<usize, f64>| -m.values().map(|q| q * q.ln()).sum::<f64>();
    let mi: f64 = joint.iter().map(|(&(a, b), &q)| q * (q / (mt[&a] * mp[&b])).ln()).sum();
    mi / ((h(&mt) + h(&mp)) / 2.0)
}

#[test]
fn hungarian_three_by_three_integer() {
    let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    let a = hungarian_match(&c).unwrap();
    assert_eq!(a.total_cost, brute_min_cost(&c));
    assert_eq!(a.total_cost, 5.0);
}

#[test]
fn nmi_and_ari_are_relabel_invariant() {
    let t = [0, 0, 1, 1, 2, 2, 2];
    let p = [1, 1, 0, 2, 2, 2, 0];
    let relabel: Vec<usize> = p.iter().map(|&c| [7, 3, 5][c]).collect();
    assert!((nmi(&t, &p).unwrap() - nmi(&t, &relabel).unwrap()).abs() < 1e-12);
    assert!((ari(&t, &p).unwrap() - ari(&t, &relabel).unwrap()).abs() < 1e-12);
    let f = |q: &[usize]| matched_f1(&t, q).unwrap().macro_f1;
    assert!((f(&p) - f(&relabel)).abs() < 1e-12);
}

#[test]
fn report_confusion_sums() {
    let t = [0, 0, 1, 1, 2, 2, 2];
    let p = [1, 1, 0, 2, 2, 2, 0];
    let r = clustering_report(&t, &p, false).unwrap();
    assert_eq!(r.confusion.cluster_sizes(), vec![2, 2, 3]);
    assert_eq!(r.confusion.class_sizes(), vec![2, 2, 3]);
    let mut classes: Vec<usize> = r.mapping.iter().map(|m| m.1).collect();
    classes.sort();
    classes.dedup();
    assert_eq!(classes.len(), r.mapping.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hungarian_matches_exhaustive_search(k in 1usize..=7, raw in proptest::collection::vec(-50i32..50, 49)) {
        let cost: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| raw[i * 7 + j] as f64).collect()).collect();
        let a = hungarian_match(&cost).unwrap();
        prop_assert_eq!(a.total_cost, brute_min_cost(&cost));
        let cols: Vec<usize> = a.row_to_col.iter().map(|c| c.unwrap()).collect();
        let mut sorted = cols.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn nmi_ari_match_oracles(
        pairs in proptest::collection::vec((0usize..4, 0usize..5), 2..=12),
    ) {
        let t: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        prop_assert!((nmi(&t, &p).unwrap() - nmi_oracle(&t, &p)).abs() < 1e-12);
        prop_assert!((ari(&t, &p).unwrap() - ari_oracle(&t, &p)).abs() < 1e-12);
        let f = matched_f1(&t, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&f.macro_f1));
        prop_assert_eq!(matched_f1(&t, &t).unwrap().macro_f1, 1.0);
    }
}
