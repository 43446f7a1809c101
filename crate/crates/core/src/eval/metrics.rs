//! Confusion counts, F2 and per-patient aggregation.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::experiment::FoldResult;
use crate::error::{Error, Result};
use crate::seed::{self, purpose};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f2(&self) -> f64 {
        f2_score(self)
    }
}

/// `5 tp / (5 tp + 4 fn + fp)`, zero when `tp == 0`.
pub fn f2_score(counts: &ConfusionCounts) -> f64 {
    if counts.tp == 0 {
        return 0.0;
    }
    let tp = counts.tp as f64;
    5.0 * tp / (5.0 * tp + 4.0 * counts.fn_ as f64 + counts.fp as f64)
}

/// Pools every prediction of the given fold results.
pub fn pooled_counts<'a>(folds: impl IntoIterator<Item = &'a FoldResult>) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for f in folds {
        for p in &f.predictions {
            c.record(p.prediction, p.label);
        }
    }
    c
}

fn counts_by_patient<'a>(
    folds: impl IntoIterator<Item = &'a FoldResult>,
) -> BTreeMap<&'a str, ConfusionCounts> {
    let mut by: BTreeMap<&str, ConfusionCounts> = BTreeMap::new();
    for f in folds {
        let c = by.entry(f.test_patient_id.as_str()).or_default();
        for p in &f.predictions {
            c.record(p.prediction, p.label);
        }
    }
    by
}

/// Per-patient F2 for patients with at least one positive window.
pub fn per_patient_f2_values<'a>(
    folds: impl IntoIterator<Item = &'a FoldResult>,
) -> BTreeMap<String, f64> {
    counts_by_patient(folds)
        .into_iter()
        .filter(|(_, c)| c.tp + c.fn_ > 0)
        .map(|(id, c)| (id.to_string(), c.f2()))
        .collect()
}

/// Unweighted mean F2 over relapse patients (those with a positive window).
pub fn per_patient_f2(folds: &[FoldResult]) -> Result<f64> {
    let values = per_patient_f2_values(folds);
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "no relapse patients among the fold results".into(),
        ));
    }
    Ok(values.values().sum::<f64>() / values.len() as f64)
}

/// Keeps relapse patients' positive windows plus a seeded sample of
/// `max(1, round(fraction * n_neg))` of their negative windows. The sample
/// depends only on `seed` and the patient, so every model and training seed
/// is scored on the same windows.
pub fn build_relapse_test_set(
    folds: &[FoldResult],
    fraction: f64,
    seed_value: u64,
) -> Result<Vec<FoldResult>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let mut patients: Vec<&str> = folds
        .iter()
        .filter(|f| f.predictions.iter().any(|p| p.label))
        .map(|f| f.test_patient_id.as_str())
        .collect();
    patients.sort_unstable();
    patients.dedup();
    let mut out = Vec::new();
    for f in folds {
        let Ok(pi) = patients.binary_search(&f.test_patient_id.as_str()) else {
            continue;
        };
        let mut negatives: Vec<usize> = (0..f.predictions.len())
            .filter(|&i| !f.predictions[i].label)
            .collect();
        negatives.sort_by_key(|&i| f.predictions[i].target_week_start);
        let keep_n = if negatives.is_empty() {
            0
        } else {
            ((fraction * negatives.len() as f64).round() as usize).clamp(1, negatives.len())
        };
        let mut rng = seed::derived_rng(seed_value, &[purpose::RELAPSE_TEST_SET, pi as u64]);
        let kept: Vec<usize> = sample(&mut rng, negatives.len(), keep_n)
            .into_iter()
            .map(|k| negatives[k])
            .collect();
        let mut g = f.clone();
        g.predictions = f
            .predictions
            .iter()
            .enumerate()
            .filter(|(i, p)| p.label || kept.contains(i))
            .map(|(_, p)| p.clone())
            .collect();
        out.push(g);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub counts: ConfusionCounts,
    pub f2: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_patient_f2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFold {
    pub seed: u64,
    pub patient_id: String,
    pub reason: String,
}

/// Pooled metrics per seed and their means; always derived from fold results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f2: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean over seeds of the per-patient F2 (seeds without relapse patients omitted).
    pub per_patient_f2: Option<f64>,
    /// Mean over seeds of the per-fold F2 for folds with a positive window.
    pub mean_fold_f2: Option<f64>,
    pub per_seed: Vec<SeedMetrics>,
    pub n_seeds: usize,
    pub skipped_folds: Vec<SkippedFold>,
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl MetricsReport {
    pub fn from_folds(folds: &[FoldResult], seeds: &[u64], skipped: Vec<SkippedFold>) -> Self {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut fold_f2 = Vec::new();
        for &s in seeds {
            let of_seed: Vec<&FoldResult> = folds.iter().filter(|f| f.seed == s).collect();
            let counts = pooled_counts(of_seed.iter().copied());
            let pp = per_patient_f2_values(of_seed.iter().copied());
            let fold_values: Vec<f64> = of_seed
                .iter()
                .filter(|f| f.predictions.iter().any(|p| p.label))
                .map(|f| pooled_counts([*f]).f2())
                .collect();
            if let Some(m) = mean(&fold_values) {
                fold_f2.push(m);
            }
            per_seed.push(SeedMetrics {
                seed: s,
                counts,
                f2: counts.f2(),
                precision: counts.precision(),
                recall: counts.recall(),
                per_patient_f2: mean(&pp.values().copied().collect::<Vec<_>>()),
            });
        }
        let pick = |f: fn(&SeedMetrics) -> f64| {
            mean(&per_seed.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0)
        };
        MetricsReport {
            f2: pick(|s| s.f2),
            precision: pick(|s| s.precision),
            recall: pick(|s| s.recall),
            per_patient_f2: mean(
                &per_seed
                    .iter()
                    .filter_map(|s| s.per_patient_f2)
                    .collect::<Vec<_>>(),
            ),
            mean_fold_f2: mean(&fold_f2),
            n_seeds: seeds.len(),
            per_seed,
            skipped_folds: skipped,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::eval::experiment::WeeklyPrediction;
    use chrono::NaiveDate;

    #[test]
    fn f2_examples() {
        assert_eq!(f2_score(&ConfusionCounts::new(5, 0, 0, 3)), 1.0);
        assert_eq!(f2_score(&ConfusionCounts::new(0, 4, 2, 1)), 0.0);
        let c = ConfusionCounts::new(2, 8, 1, 0);
        assert!((c.precision() - 0.2).abs() < 1e-15);
        assert!((c.recall() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.f2() - 0.454_545_454_545).abs() < 1e-9);
    }

    pub(crate) fn fold(id: &str, seed: u64, rows: &[(bool, bool)]) -> FoldResult {
        let d0 = NaiveDate::from_ymd_opt(2020, 1, 6).unwrap();
        FoldResult {
            test_patient_id: id.into(),
            fold: 0,
            seed,
            predictions: rows
                .iter()
                .enumerate()
                .map(|(i, &(pred, label))| WeeklyPrediction {
                    window_start: d0 + chrono::Duration::days(7 * i as i64),
                    target_week_start: d0 + chrono::Duration::days(7 * i as i64 + 28),
                    probability: if pred { 0.9 } else { 0.1 },
                    prediction: pred,
                    label,
                })
                .collect(),
            training_patients: vec![],
            normalizer_patients: vec![],
            sampled_donors: vec![],
            n_training_windows: 0,
        }
    }

    #[test]
    fn per_patient_examples() {
        let a = fold("a", 0, &[(true, true), (false, false)]);
        assert_eq!(per_patient_f2(&[a.clone()]).unwrap(), 1.0);
        let b = fold("b", 0, &[(false, true), (true, false)]);
        assert_eq!(per_patient_f2(&[a.clone(), b.clone()]).unwrap(), 0.5);
        let n = fold("n", 0, &[(true, false)]);
        assert_eq!(per_patient_f2(&[a, b, n.clone()]).unwrap(), 0.5);
        assert!(per_patient_f2(&[n]).is_err());
    }

    #[test]
    fn per_patient_mixed_fixture() {
        // a: tp 1 fn 1 fp 1 -> 5/(5+4+1) = 0.5; b: tp 2 fp 2 -> 10/12; c: no positives
        let a = fold(
            "a",
            0,
            &[(true, true), (false, true), (true, false), (false, false)],
        );
        let b = fold(
            "b",
            0,
            &[(true, true), (true, true), (true, false), (true, false)],
        );
        let c = fold("c", 0, &[(true, false), (false, false)]);
        let v = per_patient_f2(&[a, b, c]).unwrap();
        assert!((v - (0.5 + 10.0 / 12.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn relapse_test_set_counts() {
        let mut rows = vec![(false, true)];
        rows.extend(std::iter::repeat((false, false)).take(10));
        let ten = fold("a", 0, &rows);
        let three = fold(
            "b",
            0,
            &[(false, true), (true, false), (false, false), (false, false)],
        );
        let non = fold("c", 0, &[(true, false), (false, false)]);
        let out = build_relapse_test_set(&[ten, three, non], 0.2, 7).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].predictions.iter().filter(|p| !p.label).count(), 2);
        assert_eq!(out[1].predictions.iter().filter(|p| !p.label).count(), 1);
        assert!(out
            .iter()
            .all(|f| f.predictions.iter().filter(|p| p.label).count() == 1));
        assert!(build_relapse_test_set(&[], 0.0, 0).is_err());
    }

    #[test]
    fn report_from_folds() {
        let f = vec![
            fold("a", 1, &[(true, true), (true, false)]),
            fold("a", 2, &[(false, true), (true, false)]),
        ];
        let r = MetricsReport::from_folds(&f, &[1, 2], vec![]);
        assert_eq!(r.n_seeds, 2);
        assert_eq!(r.per_seed[0].counts, ConfusionCounts::new(1, 1, 0, 0));
        assert!((r.per_seed[0].f2 - 5.0 / 6.0).abs() < 1e-15);
        assert!((r.f2 - 5.0 / 12.0).abs() < 1e-15);
        assert_eq!(r, MetricsReport::from_folds(&f, &[1, 2], vec![]));
    }
}
