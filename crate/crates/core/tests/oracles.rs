use chrono::{Days, NaiveDate};
use proptest::prelude::*;
use rand::Rng;
use relapse_core::eval::{
    class_distance_distributions, f2_score, separability_index, silhouette_coefficient,
};
use relapse_core::models::{
    fuse_probabilities, mahalanobis_distance, sweep_threshold, CovarianceInverse,
};
use relapse_core::nn::Matrix;
use relapse_core::{seed, ConfusionCounts, FusionScheme, ObservationWindow};

#[test]
fn f2_matches_precision_recall_form() {
    for tp in 0..=20u64 {
        for fp in 0..=20u64 {
            for fn_ in 0..=20u64 {
                let got = f2_score(&ConfusionCounts::new(tp, fp, fn_, 0));
                if tp == 0 {
                    assert_eq!(got, 0.0);
                    continue;
                }
                let p = tp as f64 / (tp + fp) as f64;
                let r = tp as f64 / (tp + fn_) as f64;
                let want = 5.0 * p * r / (4.0 * p + r);
                assert!(
                    (got - want).abs() < 1e-12,
                    "{tp} {fp} {fn_}: {got} vs {want}"
                );
            }
        }
    }
}

fn points(n: usize, dim: usize, s: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(s);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn oracle_silhouette(p: &[Vec<f64>], l: &[usize]) -> f64 {
    let n = p.len();
    let mut s = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && l[j] == l[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(&p[i], &p[j])).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for c in l.iter().copied().filter(|&c| c != l[i]) {
            let other: Vec<usize> = (0..n).filter(|&j| l[j] == c).collect();
            let m = other.iter().map(|&j| dist(&p[i], &p[j])).sum::<f64>() / other.len() as f64;
            b = b.min(m);
        }
        if a.max(b) > 0.0 {
            s += (b - a) / a.max(b);
        }
    }
    s / n as f64
}

fn oracle_separability(p: &[Vec<f64>], l: &[usize]) -> f64 {
    let n = p.len();
    let hits = (0..n)
        .filter(|&i| {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    dist(&p[i], &p[a])
                        .total_cmp(&dist(&p[i], &p[b]))
                        .then(a.cmp(&b))
                })
                .unwrap();
            l[nearest] == l[i]
        })
        .count();
    hits as f64 / n as f64
}

#[test]
fn silhouette_and_separability_match_brute_force() {
    for s in 0..20 {
        let p = points(50, 3, s);
        let mut rng = seed::rng(s + 1000);
        let k = 2 + (s as usize % 3);
        let l: Vec<usize> = (0..50).map(|_| rng.gen_range(0..k)).collect();
        let sil = silhouette_coefficient(&p, &l).unwrap();
        assert!((sil - oracle_silhouette(&p, &l)).abs() < 1e-9);
        let sep = separability_index(&p, &l).unwrap();
        assert!((sep - oracle_separability(&p, &l)).abs() < 1e-9);
    }
}

#[test]
fn shuffled_labels_have_no_silhouette() {
    let p = points(200, 2, 7);
    let mut rng = seed::rng(8);
    let l: Vec<usize> = (0..200).map(|_| rng.gen_range(0..2)).collect();
    assert!(silhouette_coefficient(&p, &l).unwrap().abs() < 0.1);
}

#[test]
fn separated_blobs_score_high() {
    let mut p = points(40, 2, 3);
    let l: Vec<usize> = (0..40).map(|i| i % 2).collect();
    for (x, &c) in p.iter_mut().zip(&l) {
        x[0] += 10.0 * c as f64;
    }
    assert!(silhouette_coefficient(&p, &l).unwrap() > 0.8);
    assert_eq!(separability_index(&p, &l).unwrap(), 1.0);
}

fn window(i: usize, label: bool, v: f64) -> ObservationWindow {
    let d = NaiveDate::from_ymd_opt(2020, 1, 6).unwrap() + Days::new(7 * i as u64);
    ObservationWindow {
        patient_id: format!("P{}", i % 3),
        window_start: d,
        target_week_start: d + Days::new(28),
        days: 2,
        dim: 2,
        input: vec![v, 1.0 - v, v * v, 0.5],
        label,
        masked_days: 0,
    }
}

#[test]
fn class_distance_pair_counts() {
    for (n_rel, n_non) in [(1, 2), (3, 7), (5, 5)] {
        let ws: Vec<ObservationWindow> = (0..n_rel + n_non)
            .map(|i| window(i, i < n_rel, i as f64 / 10.0))
            .collect();
        let refs: Vec<&ObservationWindow> = ws.iter().collect();
        let d = class_distance_distributions(&refs).unwrap();
        assert_eq!(d.intra.len(), n_non * (n_non - 1) / 2);
        assert_eq!(d.inter.len(), n_rel * n_non);
        assert!(d.intra.iter().chain(&d.inter).all(|v| *v >= 0.0));
    }
}

#[test]
fn mahalanobis_with_identity_is_euclidean() {
    for s in 0..50 {
        let p = points(2, 6, s);
        let inv = CovarianceInverse::new(Matrix::identity(6)).unwrap();
        let m = mahalanobis_distance(&p[0], &p[1], &inv).unwrap();
        assert!((m - dist(&p[0], &p[1])).abs() < 1e-9);
    }
}

fn counts_at(scores: &[f64], labels: &[bool], t: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        c.record(s > t, y);
    }
    c
}

proptest! {
    #[test]
    fn threshold_matches_exhaustive_sweep(
        rows in prop::collection::vec((0u8..30, any::<bool>()), 2..40),
    ) {
        let scores: Vec<f64> = rows.iter().map(|r| r.0 as f64 / 3.0).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let choice = sweep_threshold(&scores, &labels).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() < 2 {
            prop_assert!(choice.degenerate);
            return Ok(());
        }
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for k in 0..sorted.len() - 1 {
            let t = (sorted[k] + sorted[k + 1]) / 2.0;
            let f = counts_at(&scores, &labels, t).f2();
            if f > best.0 {
                best = (f, t);
            }
        }
        prop_assert_eq!(choice.f2, best.0);
        prop_assert_eq!(choice.threshold, best.1);
        for k in 0..sorted.len() - 1 {
            let t = (sorted[k] + sorted[k + 1]) / 2.0;
            prop_assert!(counts_at(&scores, &labels, t).f2() <= choice.f2);
            if t < choice.threshold {
                prop_assert!(counts_at(&scores, &labels, t).f2() < choice.f2);
            }
        }
    }
}

#[test]
fn separated_score_clusters_reach_full_f2() {
    let mut rng = seed::rng(4);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let pos = i % 4 == 0;
        scores.push(if pos { 5.0 } else { 1.0 } + rng.gen_range(0.0..1.0));
        labels.push(pos);
    }
    let choice = sweep_threshold(&scores, &labels).unwrap();
    assert_eq!(choice.f2, 1.0);
    assert_eq!(counts_at(&scores, &labels, choice.threshold).f2(), 1.0);
}

#[test]
fn fusion_is_ordered_for_random_pairs() {
    let mut rng = seed::rng(11);
    for _ in 0..10_000 {
        let (a, b): (f64, f64) = (rng.gen(), rng.gen());
        let lo = fuse_probabilities(a, b, FusionScheme::Min).unwrap();
        let mid = fuse_probabilities(a, b, FusionScheme::Mean).unwrap();
        let hi = fuse_probabilities(a, b, FusionScheme::Max).unwrap();
        assert!(lo <= mid && mid <= hi);
        assert!(lo <= a.min(b) && hi >= a.max(b));
    }
    for scheme in [FusionScheme::Min, FusionScheme::Mean, FusionScheme::Max] {
        assert_eq!(fuse_probabilities(0.37, 0.37, scheme).unwrap(), 0.37);
        assert!(fuse_probabilities(1.2, 0.3, scheme).is_err());
        assert!(fuse_probabilities(0.2, f64::NAN, scheme).is_err());
    }
}
