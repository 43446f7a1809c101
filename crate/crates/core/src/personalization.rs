//! Patient similarity and balanced training-subset construction.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{ObservationWindow, PatientProfile};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonalizationMetric {
    Age,
    Bprs,
    Sfs,
    Cdss,
    Gpts,
    Combined,
}

pub const SCALAR_METRICS: [PersonalizationMetric; 5] = [
    PersonalizationMetric::Age,
    PersonalizationMetric::Bprs,
    PersonalizationMetric::Sfs,
    PersonalizationMetric::Cdss,
    PersonalizationMetric::Gpts,
];

impl PersonalizationMetric {
    pub fn name(self) -> &'static str {
        match self {
            PersonalizationMetric::Age => "age",
            PersonalizationMetric::Bprs => "bprs",
            PersonalizationMetric::Sfs => "sfs",
            PersonalizationMetric::Cdss => "cdss",
            PersonalizationMetric::Gpts => "gpts",
            PersonalizationMetric::Combined => "combined",
        }
    }

    /// Raw scalar value; `None` for `Combined` or a missing score.
    pub fn raw(self, p: &PatientProfile) -> Option<f64> {
        match self {
            PersonalizationMetric::Age => Some(p.age),
            PersonalizationMetric::Bprs => p.bprs,
            PersonalizationMetric::Sfs => p.sfs,
            PersonalizationMetric::Cdss => p.cdss,
            PersonalizationMetric::Gpts => p.gpts,
            PersonalizationMetric::Combined => None,
        }
    }
}

impl std::str::FromStr for PersonalizationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SCALAR_METRICS
            .iter()
            .chain([PersonalizationMetric::Combined].iter())
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric '{s}'")))
    }
}

impl std::fmt::Display for PersonalizationMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn required(p: &PatientProfile, m: PersonalizationMetric) -> Result<f64> {
    m.raw(p).ok_or_else(|| {
        Error::Data(format!(
            "patient '{}' has no {} score",
            p.patient_id,
            m.name()
        ))
    })
}

/// Cohort-wide min/max of the five scalar metrics, for the combined metric.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricScaler {
    ranges: [(f64, f64); 5],
}

impl MetricScaler {
    pub fn fit(cohort: &[PatientProfile]) -> Result<Self> {
        if cohort.len() < 2 {
            return Err(Error::InvalidArgument(
                "combined metric needs at least 2 patients".into(),
            ));
        }
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 5];
        for p in cohort {
            for (r, m) in ranges.iter_mut().zip(SCALAR_METRICS) {
                let v = required(p, m)?;
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        Ok(MetricScaler { ranges })
    }

    /// Mean of the five min-max scaled metrics; constant metrics contribute 0.5.
    pub fn combined(&self, p: &PatientProfile) -> Result<f64> {
        let mut total = 0.0;
        for ((lo, hi), m) in self.ranges.iter().zip(SCALAR_METRICS) {
            let v = required(p, m)?;
            total += if hi > lo {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.5
            };
        }
        Ok(total / 5.0)
    }
}

pub fn combined_metric(profile: &PatientProfile, cohort: &[PatientProfile]) -> Result<f64> {
    MetricScaler::fit(cohort)?.combined(profile)
}

/// `|a - b|` on the chosen metric. `scaler` is required for `Combined`.
pub fn metric_distance(
    a: &PatientProfile,
    b: &PatientProfile,
    metric: PersonalizationMetric,
    scaler: Option<&MetricScaler>,
) -> Result<f64> {
    match metric {
        PersonalizationMetric::Combined => {
            let s = scaler.ok_or_else(|| {
                Error::InvalidArgument("combined metric needs a cohort scaler".into())
            })?;
            Ok((s.combined(a)? - s.combined(b)?).abs())
        }
        m => Ok((required(a, m)? - required(b, m)?).abs()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityRanking {
    pub test_patient_id: String,
    pub metric: PersonalizationMetric,
    /// Ascending by distance, ties by patient id.
    pub ranked: Vec<(String, f64)>,
}

impl SimilarityRanking {
    pub fn distance_of(&self, id: &str) -> Option<f64> {
        self.ranked.iter().find(|(p, _)| p == id).map(|(_, d)| *d)
    }
}

pub fn rank_patients(
    test: &PatientProfile,
    candidates: &[PatientProfile],
    metric: PersonalizationMetric,
    scaler: Option<&MetricScaler>,
) -> Result<SimilarityRanking> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "no candidate patients to rank".into(),
        ));
    }
    let mut ranked = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.patient_id == test.patient_id {
            return Err(Error::InvalidArgument(
                "candidates must exclude the test patient".into(),
            ));
        }
        ranked.push((
            c.patient_id.clone(),
            metric_distance(test, c, metric, scaler)?,
        ));
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(SimilarityRanking {
        test_patient_id: test.patient_id.clone(),
        metric,
        ranked,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "stratum")]
pub enum Provenance {
    Personalized,
    Random,
    Stratified(Stratum),
    FullSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Closest,
    FirstQuartile,
    Median,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Closest, Stratum::FirstQuartile, Stratum::Median];

    /// First ranking index considered: `floor(q * n)`.
    pub fn start_index(self, n: usize) -> usize {
        match self {
            Stratum::Closest => 0,
            Stratum::FirstQuartile => n / 4,
            Stratum::Median => n / 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Closest => "closest",
            Stratum::FirstQuartile => "first_quartile",
            Stratum::Median => "median",
        }
    }
}

/// Indices into the training-window slice the subset was built from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingSubset {
    pub relapse: Vec<usize>,
    pub non_relapse: Vec<usize>,
    pub provenance: Provenance,
    /// Patients whose non-relapse windows formed the sampling pool (or all
    /// training patients for random/full-set subsets).
    pub donors: Vec<String>,
    pub seed: u64,
}

impl TrainingSubset {
    pub fn indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .relapse
            .iter()
            .chain(&self.non_relapse)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }

    pub fn len(&self) -> usize {
        self.relapse.len() + self.non_relapse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn windows<'a>(&self, pool: &'a [ObservationWindow]) -> Vec<&'a ObservationWindow> {
        self.indices().into_iter().map(|i| &pool[i]).collect()
    }

    /// Distinct patients contributing sampled non-relapse windows.
    pub fn sampled_donors(&self, pool: &[ObservationWindow]) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .non_relapse
            .iter()
            .map(|&i| pool[i].patient_id.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }
}

fn split_labels(
    windows: &[ObservationWindow],
    test_id: Option<&str>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rel = Vec::new();
    let mut non = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        if Some(w.patient_id.as_str()) == test_id {
            return Err(Error::Leakage(format!(
                "training windows contain test patient '{}'",
                w.patient_id
            )));
        }
        if w.label {
            rel.push(i);
        } else {
            non.push(i);
        }
    }
    if rel.is_empty() {
        return Err(Error::NoPositiveInstances);
    }
    Ok((rel, non))
}

fn sample_from(pool: &[usize], n: usize, seed_value: u64) -> Result<Vec<usize>> {
    if pool.len() < n {
        return Err(Error::InsufficientDonors {
            required: n,
            available: pool.len(),
        });
    }
    let mut rng = seed::rng(seed_value);
    let mut picked: Vec<usize> = sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

fn accumulate_from(
    windows: &[ObservationWindow],
    ranking: &SimilarityRanking,
    start: usize,
    rng_seed: u64,
    provenance: Provenance,
) -> Result<TrainingSubset> {
    let (relapse, non) = split_labels(windows, Some(&ranking.test_patient_id))?;
    let n_rel = relapse.len();
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &non {
        by_patient
            .entry(windows[i].patient_id.as_str())
            .or_default()
            .push(i);
    }
    let mut donors = Vec::new();
    let mut pool: Vec<usize> = Vec::new();
    for (id, _) in ranking.ranked.iter().skip(start) {
        if pool.len() >= n_rel {
            break;
        }
        donors.push(id.clone());
        if let Some(ws) = by_patient.get(id.as_str()) {
            pool.extend(ws);
        }
    }
    pool.sort_unstable();
    let non_relapse = sample_from(&pool, n_rel, rng_seed)?;
    Ok(TrainingSubset {
        relapse,
        non_relapse,
        provenance,
        donors,
        seed: rng_seed,
    })
}

/// All relapse windows plus `N_rel` non-relapse windows drawn uniformly from
/// the smallest prefix of the ranking whose non-relapse pool covers `N_rel`.
pub fn build_personalized_subset(
    training_windows: &[ObservationWindow],
    ranking: &SimilarityRanking,
    rng_seed: u64,
) -> Result<TrainingSubset> {
    accumulate_from(
        training_windows,
        ranking,
        0,
        rng_seed,
        Provenance::Personalized,
    )
}

/// Like [`build_personalized_subset`] but donor accumulation starts at the
/// stratum's percentile index and never wraps around.
pub fn distance_stratified_subset(
    training_windows: &[ObservationWindow],
    ranking: &SimilarityRanking,
    stratum: Stratum,
    rng_seed: u64,
) -> Result<TrainingSubset> {
    if ranking.ranked.is_empty() {
        return Err(Error::InvalidArgument("empty ranking".into()));
    }
    let start = stratum.start_index(ranking.ranked.len());
    let provenance = match stratum {
        Stratum::Closest => Provenance::Personalized,
        s => Provenance::Stratified(s),
    };
    accumulate_from(training_windows, ranking, start, rng_seed, provenance)
}

/// All relapse windows plus `N_rel` non-relapse windows drawn uniformly from
/// every training patient.
pub fn build_random_subset(
    training_windows: &[ObservationWindow],
    rng_seed: u64,
) -> Result<TrainingSubset> {
    let (relapse, non) = split_labels(training_windows, None)?;
    let non_relapse = sample_from(&non, relapse.len(), rng_seed)?;
    let donors: BTreeSet<&str> = training_windows
        .iter()
        .map(|w| w.patient_id.as_str())
        .collect();
    Ok(TrainingSubset {
        relapse,
        non_relapse,
        provenance: Provenance::Random,
        donors: donors.into_iter().map(str::to_string).collect(),
        seed: rng_seed,
    })
}

/// Every training window, imbalanced.
pub fn full_training_set(training_windows: &[ObservationWindow]) -> Result<TrainingSubset> {
    let (relapse, non_relapse) = split_labels(training_windows, None)?;
    let donors: BTreeSet<&str> = training_windows
        .iter()
        .map(|w| w.patient_id.as_str())
        .collect();
    Ok(TrainingSubset {
        relapse,
        non_relapse,
        provenance: Provenance::FullSet,
        donors: donors.into_iter().map(str::to_string).collect(),
        seed: 0,
    })
}

/// Mean metric distance of the patients whose non-relapse windows were sampled.
pub fn mean_donor_distance(
    subset: &TrainingSubset,
    pool: &[ObservationWindow],
    ranking: &SimilarityRanking,
) -> f64 {
    let donors = subset.sampled_donors(pool);
    if donors.is_empty() {
        return 0.0;
    }
    donors
        .iter()
        .map(|d| ranking.distance_of(d).unwrap_or(0.0))
        .sum::<f64>()
        / donors.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    pub(crate) fn profile(id: &str, age: f64) -> PatientProfile {
        PatientProfile {
            patient_id: id.into(),
            age,
            bprs: Some(30.0),
            sfs: Some(100.0),
            cdss: Some(5.0),
            gpts: Some(50.0),
        }
    }

    fn window(id: &str, k: i64, label: bool) -> ObservationWindow {
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(7 * k);
        ObservationWindow {
            patient_id: id.into(),
            window_start: d,
            target_week_start: d,
            days: 1,
            dim: 1,
            input: vec![k as f64],
            label,
            masked_days: 0,
        }
    }

    #[test]
    fn scalar_distances() {
        let a = profile("a", 30.0);
        assert_eq!(
            metric_distance(&a, &a, PersonalizationMetric::Age, None).unwrap(),
            0.0
        );
        let b = profile("b", 25.0);
        let c = profile("c", 40.0);
        assert_eq!(
            metric_distance(&b, &c, PersonalizationMetric::Age, None).unwrap(),
            15.0
        );
        let mut s1 = profile("s1", 1.0);
        let mut s2 = profile("s2", 1.0);
        s1.sfs = Some(110.0);
        s2.sfs = Some(95.0);
        assert_eq!(
            metric_distance(&s1, &s2, PersonalizationMetric::Sfs, None).unwrap(),
            15.0
        );
        s2.sfs = None;
        assert!(metric_distance(&s1, &s2, PersonalizationMetric::Sfs, None).is_err());
    }

    #[test]
    fn combined_metric_extremes() {
        let lo = PatientProfile {
            patient_id: "lo".into(),
            age: 20.0,
            bprs: Some(10.0),
            sfs: Some(80.0),
            cdss: Some(0.0),
            gpts: Some(30.0),
        };
        let hi = PatientProfile {
            patient_id: "hi".into(),
            age: 60.0,
            bprs: Some(50.0),
            sfs: Some(160.0),
            cdss: Some(20.0),
            gpts: Some(90.0),
        };
        let mid = PatientProfile {
            patient_id: "mid".into(),
            age: 40.0,
            ..lo.clone()
        };
        let cohort = vec![lo.clone(), hi.clone(), mid.clone()];
        assert_eq!(combined_metric(&lo, &cohort).unwrap(), 0.0);
        assert_eq!(combined_metric(&hi, &cohort).unwrap(), 1.0);
        assert!((combined_metric(&mid, &cohort).unwrap() - 0.1).abs() < 1e-15);
        assert!(combined_metric(&lo, &cohort[..1]).is_err());
    }

    #[test]
    fn constant_metric_contributes_half() {
        let a = profile("a", 30.0);
        let b = profile("b", 30.0);
        assert_eq!(combined_metric(&a, &[a.clone(), b]).unwrap(), 0.5);
    }

    #[test]
    fn ranking_ties_by_id() {
        let t = profile("t", 25.0);
        let cands = vec![profile("z", 30.0), profile("m", 40.0), profile("b", 20.0)];
        let r = rank_patients(&t, &cands, PersonalizationMetric::Age, None).unwrap();
        let ids: Vec<&str> = r.ranked.iter().map(|x| x.0.as_str()).collect();
        assert_eq!(ids, vec!["b", "z", "m"]);
        assert!(rank_patients(&t, &[], PersonalizationMetric::Age, None).is_err());
        let single = rank_patients(&t, &cands[1..2], PersonalizationMetric::Age, None).unwrap();
        assert_eq!(single.ranked[0].0, "m");
        assert!(rank_patients(&t, &[t.clone()], PersonalizationMetric::Age, None).is_err());
    }

    fn fixture() -> (Vec<ObservationWindow>, SimilarityRanking) {
        let mut ws = Vec::new();
        // five relapse windows spread over two patients
        for k in 0..3 {
            ws.push(window("r1", k, true));
        }
        for k in 0..2 {
            ws.push(window("r2", k, true));
        }
        for k in 0..6 {
            ws.push(window("n1", k, false));
        }
        for k in 0..4 {
            ws.push(window("n2", k, false));
            ws.push(window("n3", k, false));
        }
        let ranking = SimilarityRanking {
            test_patient_id: "t".into(),
            metric: PersonalizationMetric::Age,
            ranked: vec![
                ("n1".into(), 1.0),
                ("n2".into(), 2.0),
                ("n3".into(), 3.0),
                ("r1".into(), 4.0),
                ("r2".into(), 5.0),
            ],
        };
        (ws, ranking)
    }

    #[test]
    fn personalized_subset_balanced_from_nearest() {
        let (ws, ranking) = fixture();
        let s = build_personalized_subset(&ws, &ranking, 3).unwrap();
        assert_eq!(s.relapse.len(), 5);
        assert_eq!(s.non_relapse.len(), 5);
        assert_eq!(s.donors, vec!["n1".to_string()]);
        assert_eq!(s.sampled_donors(&ws), vec!["n1".to_string()]);
        assert_eq!(s, build_personalized_subset(&ws, &ranking, 3).unwrap());
        let closest = distance_stratified_subset(&ws, &ranking, Stratum::Closest, 3).unwrap();
        assert_eq!(closest.indices(), s.indices());
    }

    #[test]
    fn stratified_starts_and_no_wrap() {
        let (ws, ranking) = fixture();
        let s = distance_stratified_subset(&ws, &ranking, Stratum::FirstQuartile, 1).unwrap();
        assert_eq!(s.donors, vec!["n2".to_string(), "n3".to_string()]);
        let err = distance_stratified_subset(&ws, &ranking, Stratum::Median, 1).unwrap_err();
        assert!(matches!(err, Error::InsufficientDonors { .. }), "{err}");
        assert_eq!(Stratum::Median.start_index(8), 4);
        assert_eq!(Stratum::FirstQuartile.start_index(4), 1);
    }

    #[test]
    fn random_subset_rules() {
        let (ws, _) = fixture();
        let a = build_random_subset(&ws, 1).unwrap();
        assert_eq!(a.relapse.len(), 5);
        assert_eq!(a.non_relapse.len(), 5);
        let mut donors = BTreeSet::new();
        for s in 0..10 {
            let b = build_random_subset(&ws, s).unwrap();
            assert_eq!(a.relapse, b.relapse);
            donors.extend(b.sampled_donors(&ws));
        }
        assert!(donors.len() > 1);
    }

    #[test]
    fn no_positive_and_leakage_errors() {
        let ws = vec![window("a", 0, false), window("b", 0, false)];
        assert!(matches!(
            build_random_subset(&ws, 0),
            Err(Error::NoPositiveInstances)
        ));
        let (mut ws, ranking) = fixture();
        ws.push(window("t", 9, false));
        assert!(matches!(
            build_personalized_subset(&ws, &ranking, 0),
            Err(Error::Leakage(_))
        ));
    }
}
