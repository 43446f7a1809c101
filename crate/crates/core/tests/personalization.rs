use chrono::{Days, NaiveDate};
use proptest::prelude::*;
use relapse_core::personalization::{
    build_personalized_subset, build_random_subset, distance_stratified_subset, metric_distance,
    rank_patients, MetricScaler, PersonalizationMetric, Stratum, SCALAR_METRICS,
};
use relapse_core::{ObservationWindow, PatientProfile};

fn profile(i: usize, v: [f64; 5]) -> PatientProfile {
    PatientProfile {
        patient_id: format!("P{i:02}"),
        age: v[0],
        bprs: Some(v[1]),
        sfs: Some(v[2]),
        cdss: Some(v[3]),
        gpts: Some(v[4]),
    }
}

/// Values on a coarse grid so that distance ties are common.
fn cohort_strategy() -> impl Strategy<Value = Vec<PatientProfile>> {
    prop::collection::vec(prop::array::uniform5(0u8..12), 3..15).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, r)| profile(i, r.map(|x| 20.0 + 5.0 * x as f64)))
            .collect()
    })
}

fn metric_strategy() -> impl Strategy<Value = PersonalizationMetric> {
    prop_oneof![
        Just(PersonalizationMetric::Age),
        Just(PersonalizationMetric::Bprs),
        Just(PersonalizationMetric::Sfs),
        Just(PersonalizationMetric::Cdss),
        Just(PersonalizationMetric::Gpts),
        Just(PersonalizationMetric::Combined),
    ]
}

fn raw(p: &PatientProfile, m: PersonalizationMetric) -> f64 {
    match m {
        PersonalizationMetric::Age => p.age,
        PersonalizationMetric::Bprs => p.bprs.unwrap(),
        PersonalizationMetric::Sfs => p.sfs.unwrap(),
        PersonalizationMetric::Cdss => p.cdss.unwrap(),
        PersonalizationMetric::Gpts => p.gpts.unwrap(),
        PersonalizationMetric::Combined => unreachable!(),
    }
}

/// Mean of per-metric min-max scores, written independently of the crate.
fn oracle_combined(p: &PatientProfile, cohort: &[PatientProfile]) -> f64 {
    SCALAR_METRICS
        .iter()
        .map(|&m| {
            let lo = cohort
                .iter()
                .map(|q| raw(q, m))
                .fold(f64::INFINITY, f64::min);
            let hi = cohort
                .iter()
                .map(|q| raw(q, m))
                .fold(f64::NEG_INFINITY, f64::max);
            if hi == lo {
                0.5
            } else {
                (raw(p, m) - lo) / (hi - lo)
            }
        })
        .sum::<f64>()
        / 5.0
}

/// Brute force: repeatedly extract the minimum by (distance, id).
fn oracle_ranking(
    test: &PatientProfile,
    candidates: &[PatientProfile],
    metric: PersonalizationMetric,
    cohort: &[PatientProfile],
) -> Vec<(String, f64)> {
    let dist = |c: &PatientProfile| match metric {
        PersonalizationMetric::Combined => {
            (oracle_combined(test, cohort) - oracle_combined(c, cohort)).abs()
        }
        m => (raw(test, m) - raw(c, m)).abs(),
    };
    let mut left: Vec<(String, f64)> = candidates
        .iter()
        .map(|c| (c.patient_id.clone(), dist(c)))
        .collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (a, b) = (&left[k], &left[best]);
            if a.1 < b.1 || (a.1 == b.1 && a.0 < b.0) {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Each patient gets `n_windows` weekly windows; the first `n_pos` are positive.
fn windows_for(cohort: &[PatientProfile], counts: &[(usize, usize)]) -> Vec<ObservationWindow> {
    let start = NaiveDate::from_ymd_opt(2020, 1, 6).unwrap();
    let mut out = Vec::new();
    for (p, &(n_windows, n_pos)) in cohort.iter().zip(counts) {
        for w in 0..n_windows {
            let ws = start + Days::new(7 * w as u64);
            out.push(ObservationWindow {
                patient_id: p.patient_id.clone(),
                window_start: ws,
                target_week_start: ws + Days::new(28),
                days: 1,
                dim: 1,
                input: vec![0.0],
                label: w < n_pos,
                masked_days: 0,
            });
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ranking_matches_brute_force(
        cohort in cohort_strategy(),
        metric in metric_strategy(),
        test_idx in 0usize..15,
    ) {
        let t = test_idx % cohort.len();
        let test = &cohort[t];
        let candidates: Vec<PatientProfile> =
            cohort.iter().filter(|p| p.patient_id != test.patient_id).cloned().collect();
        let scaler = MetricScaler::fit(&cohort).unwrap();
        let got = rank_patients(test, &candidates, metric, Some(&scaler)).unwrap();
        let want = oracle_ranking(test, &candidates, metric, &cohort);
        prop_assert_eq!(got.ranked.len(), want.len());
        for ((gi, gd), (wi, wd)) in got.ranked.iter().zip(&want) {
            prop_assert_eq!(gi, wi);
            prop_assert!((gd - wd).abs() < 1e-12);
        }
        for w in got.ranked.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn subsets_are_balanced_and_exclude_test_patient(
        cohort in cohort_strategy(),
        counts in prop::collection::vec((4usize..12, 0usize..3), 15),
        metric in metric_strategy(),
        seed in any::<u64>(),
    ) {
        let test = &cohort[0];
        let train: Vec<PatientProfile> = cohort[1..].to_vec();
        let windows = windows_for(&train, &counts);
        let scaler = MetricScaler::fit(&cohort).unwrap();
        let ranking = rank_patients(test, &train, metric, Some(&scaler)).unwrap();
        let n_rel = windows.iter().filter(|w| w.label).count();
        let n_non = windows.len() - n_rel;

        let mut built = Vec::new();
        built.push(build_personalized_subset(&windows, &ranking, seed));
        for s in Stratum::ALL {
            built.push(distance_stratified_subset(&windows, &ranking, s, seed));
        }
        built.push(build_random_subset(&windows, seed));
        for result in built {
            match result {
                Ok(subset) => {
                    prop_assert_eq!(subset.relapse.len(), n_rel);
                    prop_assert_eq!(subset.non_relapse.len(), subset.relapse.len());
                    for w in subset.windows(&windows) {
                        prop_assert_ne!(&w.patient_id, &test.patient_id);
                    }
                    for &i in &subset.relapse {
                        prop_assert!(windows[i].label);
                    }
                    for &i in &subset.non_relapse {
                        prop_assert!(!windows[i].label);
                    }
                    let mut idx = subset.non_relapse.clone();
                    idx.dedup();
                    prop_assert_eq!(idx.len(), subset.non_relapse.len());
                }
                Err(relapse_core::Error::NoPositiveInstances) => prop_assert_eq!(n_rel, 0),
                Err(relapse_core::Error::InsufficientDonors { required, available }) => {
                    prop_assert_eq!(required, n_rel);
                    prop_assert!(available < required && available <= n_non);
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }

    #[test]
    fn personalized_donors_are_minimal_prefix(
        cohort in cohort_strategy(),
        counts in prop::collection::vec((4usize..12, 0usize..3), 15),
        seed in any::<u64>(),
    ) {
        let test = &cohort[0];
        let train: Vec<PatientProfile> = cohort[1..].to_vec();
        let windows = windows_for(&train, &counts);
        let ranking = rank_patients(test, &train, PersonalizationMetric::Sfs, None).unwrap();
        if let Ok(subset) = build_personalized_subset(&windows, &ranking, seed) {
            let prefix: Vec<String> =
                ranking.ranked.iter().take(subset.donors.len()).map(|(id, _)| id.clone()).collect();
            prop_assert_eq!(&subset.donors, &prefix);
            let pool_size = |k: usize| {
                windows
                    .iter()
                    .filter(|w| !w.label && prefix[..k].contains(&w.patient_id))
                    .count()
            };
            prop_assert!(pool_size(subset.donors.len()) >= subset.relapse.len());
            prop_assert!(pool_size(subset.donors.len() - 1) < subset.relapse.len());
            for d in subset.sampled_donors(&windows) {
                prop_assert!(subset.donors.contains(&d));
            }
        }
    }

    #[test]
    fn distances_are_symmetric(cohort in cohort_strategy(), metric in metric_strategy()) {
        let scaler = MetricScaler::fit(&cohort).unwrap();
        for a in &cohort {
            for b in &cohort {
                let ab = metric_distance(a, b, metric, Some(&scaler)).unwrap();
                let ba = metric_distance(b, a, metric, Some(&scaler)).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!(ab >= 0.0);
            }
        }
    }
}

#[test]
fn subset_building_is_seeded() {
    let cohort: Vec<PatientProfile> = (0..6)
        .map(|i| profile(i, [30.0, 40.0, 100.0 + i as f64, 5.0, 60.0]))
        .collect();
    let windows = windows_for(&cohort[1..], &[(10, 2), (10, 0), (10, 1), (10, 0), (10, 0)]);
    let a = build_random_subset(&windows, 9).unwrap();
    let b = build_random_subset(&windows, 9).unwrap();
    assert_eq!(a, b);
}
