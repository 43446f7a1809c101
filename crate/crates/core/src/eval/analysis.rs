//! Correlating donor-distance changes with F2 changes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::experiment::{run_experiment, ExperimentConfig, FoldResult, PersonalizationMode};
use super::metrics::pooled_counts;
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::personalization::{metric_distance, PersonalizationMetric, Stratum};
use crate::seed::{self, purpose};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::shape("pearson", x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided permutation p-value `(count + 1) / (permutations + 1)`, counting
/// shuffles of `y` whose |r| reaches the observed |r|.
pub fn permutation_p_value(
    x: &[f64],
    y: &[f64],
    permutations: usize,
    seed_value: u64,
) -> Result<f64> {
    let observed = pearson(x, y)?.abs();
    let mut rng = seed::derived_rng(seed_value, &[purpose::PERMUTATION]);
    let mut shuffled = y.to_vec();
    let mut count = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if pearson(x, &shuffled)?.abs() >= observed - 1e-12 {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (permutations + 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceAnalysisRecord {
    pub patient_id: String,
    pub stratum: Stratum,
    pub dist: f64,
    pub dist_rand: f64,
    pub f2: f64,
    pub f2_rand: f64,
    /// `dist_rand - dist`
    pub delta_dist: f64,
    /// `f2 - f2_rand`
    pub delta_f2: f64,
}

impl DistanceAnalysisRecord {
    pub fn new(
        patient_id: String,
        stratum: Stratum,
        dist: f64,
        dist_rand: f64,
        f2: f64,
        f2_rand: f64,
    ) -> Self {
        DistanceAnalysisRecord {
            patient_id,
            stratum,
            dist,
            dist_rand,
            f2,
            f2_rand,
            delta_dist: dist_rand - dist,
            delta_f2: f2 - f2_rand,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceAnalysis {
    pub records: Vec<DistanceAnalysisRecord>,
    pub r: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Per patient: mean over seeds of (donor distance, own F2).
fn per_patient_means(
    cohort: &Cohort,
    folds: &[FoldResult],
    metric: PersonalizationMetric,
) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for f in folds {
        let test = cohort
            .patient(&f.test_patient_id)
            .ok_or_else(|| Error::Data(format!("unknown patient '{}'", f.test_patient_id)))?;
        let mut dist = 0.0;
        for d in &f.sampled_donors {
            let donor = cohort
                .patient(d)
                .ok_or_else(|| Error::Data(format!("unknown donor '{d}'")))?;
            dist += metric_distance(test, donor, metric, None)?;
        }
        if !f.sampled_donors.is_empty() {
            dist /= f.sampled_donors.len() as f64;
        }
        let e = acc
            .entry(f.test_patient_id.clone())
            .or_insert((0.0, 0.0, 0));
        e.0 += dist;
        e.1 += pooled_counts([f]).f2();
        e.2 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(k, (d, f2, n))| (k, (d / n as f64, f2 / n as f64)))
        .collect())
}

/// Random-subset baseline versus each stratum of SFS-ranked donors, on the
/// relapse patients' folds only.
pub fn sfs_distance_analysis(
    cohort: &Cohort,
    base: &ExperimentConfig,
    strata: &[Stratum],
    permutations: usize,
    seed_value: u64,
) -> Result<DistanceAnalysis> {
    let metric = PersonalizationMetric::Sfs;
    let relapse_ids = cohort.relapse_patient_ids();
    if relapse_ids.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "distance analysis needs at least 3 relapse patients, got {}",
            relapse_ids.len()
        )));
    }
    let with = |mode: PersonalizationMode| ExperimentConfig {
        personalization: mode,
        test_patients: Some(relapse_ids.clone()),
        ..base.clone()
    };
    let baseline = run_experiment(cohort, &with(PersonalizationMode::Random))?;
    let rand_means = per_patient_means(cohort, &baseline.folds, metric)?;
    let mut records = Vec::new();
    for &stratum in strata {
        let run = run_experiment(
            cohort,
            &with(PersonalizationMode::Stratified { metric, stratum }),
        )?;
        for (id, (dist, f2)) in per_patient_means(cohort, &run.folds, metric)? {
            if let Some(&(dist_rand, f2_rand)) = rand_means.get(&id) {
                records.push(DistanceAnalysisRecord::new(
                    id, stratum, dist, dist_rand, f2, f2_rand,
                ));
            }
        }
    }
    let x: Vec<f64> = records.iter().map(|r| r.delta_dist).collect();
    let y: Vec<f64> = records.iter().map(|r| r.delta_f2).collect();
    let r = pearson(&x, &y)?;
    let p_value = permutation_p_value(&x, &y, permutations, seed_value)?;
    Ok(DistanceAnalysis {
        records,
        r,
        p_value,
        permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[2.0, 1.0, 4.0, 3.0]).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn permutation_p_bounds() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let p = permutation_p_value(&x, &x, 200, 3).unwrap();
        assert!((p - 1.0 / 201.0).abs() < 1e-15);
        let y: Vec<f64> = (0..30).map(|i| ((i * 7919) % 31) as f64).collect();
        let p = permutation_p_value(&x, &y, 200, 3).unwrap();
        assert!(p >= 1.0 / 201.0 && p <= 1.0);
        assert_eq!(p, permutation_p_value(&x, &y, 200, 3).unwrap());
    }

    #[test]
    fn record_deltas() {
        let r = DistanceAnalysisRecord::new("a".into(), Stratum::Median, 3.0, 5.0, 0.4, 0.1);
        assert_eq!(r.delta_dist, 2.0);
        assert!((r.delta_f2 - 0.3).abs() < 1e-15);
    }
}
