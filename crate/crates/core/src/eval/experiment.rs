//! Leave-one-patient-out sequential evaluation.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{MetricsReport, SkippedFold};
use crate::data::{
    build_day_vectors, fit_normalizer, fit_reference_stats, impute_missing, make_windows, Cohort,
    ModalitySelection, Normalizer, ObservationWindow, PatientDays, WindowConfig,
};
use crate::error::{Error, Result};
use crate::models::anomaly::non_relapse_days;
use crate::models::{
    fit_anomaly_detector, train_autoencoder, train_relapseprednet, train_rf, AutoencoderConfig,
    ForestConfig, ModelFamily, RelapsePredNetConfig, TrainedModel,
};
use crate::personalization::{
    build_personalized_subset, build_random_subset, distance_stratified_subset, full_training_set,
    rank_patients, MetricScaler, PersonalizationMetric, Stratum, TrainingSubset,
};
use crate::seed::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    Rpnet(RelapsePredNetConfig),
    Autoenc(AutoencoderConfig),
    Rf(ForestConfig),
}

impl ModelConfig {
    pub fn family(&self) -> ModelFamily {
        match self {
            ModelConfig::Rpnet(_) => ModelFamily::Rpnet,
            ModelConfig::Autoenc(_) => ModelFamily::Autoenc,
            ModelConfig::Rf(_) => ModelFamily::Rf,
        }
    }

    pub fn default_for(family: ModelFamily) -> Self {
        match family {
            ModelFamily::Rpnet => ModelConfig::Rpnet(RelapsePredNetConfig::default()),
            ModelFamily::Autoenc => ModelConfig::Autoenc(AutoencoderConfig::default()),
            ModelFamily::Rf => ModelConfig::Rf(ForestConfig::default()),
        }
    }
}

/// How the training set of each fold is assembled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PersonalizationMode {
    Metric {
        metric: PersonalizationMetric,
    },
    Stratified {
        metric: PersonalizationMetric,
        stratum: Stratum,
    },
    Random,
    /// Every training window, imbalanced.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub window: WindowConfig,
    pub modalities: ModalitySelection,
    pub model: ModelConfig,
    pub personalization: PersonalizationMode,
    pub seeds: Vec<u64>,
    /// Restricts evaluation to these held-out patients; all patients when `None`.
    pub test_patients: Option<Vec<String>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            window: WindowConfig::default(),
            modalities: ModalitySelection::all(),
            model: ModelConfig::Rpnet(RelapsePredNetConfig::default()),
            personalization: PersonalizationMode::Metric {
                metric: PersonalizationMetric::Sfs,
            },
            seeds: (0..10).collect(),
            test_patients: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub test_patient_id: String,
    pub train_patient_ids: Vec<String>,
}

pub fn lopo_folds(cohort: &Cohort) -> Result<Vec<Fold>> {
    let ids = cohort.patient_ids();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-patient-out needs at least 2 patients, got {}",
            ids.len()
        )));
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(index, id)| Fold {
            index,
            test_patient_id: id.clone(),
            train_patient_ids: ids.iter().filter(|o| *o != id).cloned().collect(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeeklyPrediction {
    pub window_start: NaiveDate,
    pub target_week_start: NaiveDate,
    pub probability: f64,
    pub prediction: bool,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub test_patient_id: String,
    pub fold: usize,
    pub seed: u64,
    /// Date ordered, one per emitted test window.
    pub predictions: Vec<WeeklyPrediction>,
    /// Patients contributing any training window.
    pub training_patients: Vec<String>,
    /// Patients whose windows fitted the normalizer.
    pub normalizer_patients: Vec<String>,
    /// Patients whose non-relapse windows were sampled.
    pub sampled_donors: Vec<String>,
    pub n_training_windows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRun {
    pub folds: Vec<FoldResult>,
    pub report: MetricsReport,
}

/// Imputed windows of every patient, using training-patient reference stats.
pub struct FoldData {
    pub fold: Fold,
    pub training: Vec<ObservationWindow>,
    pub test: Vec<ObservationWindow>,
}

pub fn prepare_fold(
    cohort: &Cohort,
    days: &[PatientDays],
    fold: &Fold,
    config: &ExperimentConfig,
) -> Result<FoldData> {
    let train_days: Vec<&PatientDays> = days
        .iter()
        .filter(|d| d.patient_id != fold.test_patient_id)
        .collect();
    let reference = fit_reference_stats(&train_days)?;
    let mut training = Vec::new();
    let mut test = Vec::new();
    for d in days {
        let imputed = impute_missing(d, &reference)?;
        let set = make_windows(
            &imputed,
            &cohort.relapse_dates(&d.patient_id),
            &config.window,
            &config.modalities,
        )?;
        if d.patient_id == fold.test_patient_id {
            test = set.windows;
        } else {
            training.extend(set.windows);
        }
    }
    Ok(FoldData {
        fold: fold.clone(),
        training,
        test,
    })
}

pub fn build_subset(
    cohort: &Cohort,
    data: &FoldData,
    mode: &PersonalizationMode,
    scaler: Option<&MetricScaler>,
    subset_seed: u64,
) -> Result<TrainingSubset> {
    let ranking = |metric| -> Result<_> {
        let test = cohort.patient(&data.fold.test_patient_id).ok_or_else(|| {
            Error::Data(format!("unknown patient '{}'", data.fold.test_patient_id))
        })?;
        let candidates: Vec<_> = cohort
            .patients
            .iter()
            .filter(|p| p.patient_id != test.patient_id)
            .cloned()
            .collect();
        rank_patients(test, &candidates, metric, scaler)
    };
    match mode {
        PersonalizationMode::Metric { metric } => {
            build_personalized_subset(&data.training, &ranking(*metric)?, subset_seed)
        }
        PersonalizationMode::Stratified { metric, stratum } => {
            distance_stratified_subset(&data.training, &ranking(*metric)?, *stratum, subset_seed)
        }
        PersonalizationMode::Random => build_random_subset(&data.training, subset_seed),
        PersonalizationMode::None => full_training_set(&data.training),
    }
}

fn train_model(
    model: &ModelConfig,
    windows: &[&ObservationWindow],
    normalizer: &Normalizer,
    train_seed: u64,
) -> Result<TrainedModel> {
    Ok(match model {
        ModelConfig::Rpnet(c) => {
            let c = RelapsePredNetConfig {
                seed: train_seed,
                ..c.clone()
            };
            TrainedModel::Rpnet(train_relapseprednet(windows, normalizer, &c)?)
        }
        ModelConfig::Autoenc(c) => {
            let c = AutoencoderConfig {
                seed: train_seed,
                ..c.clone()
            };
            let ae = train_autoencoder(&non_relapse_days(windows), &c)?;
            TrainedModel::Autoenc(fit_anomaly_detector(&ae, windows, normalizer)?)
        }
        ModelConfig::Rf(c) => {
            let c = ForestConfig {
                seed: train_seed,
                ..c.clone()
            };
            TrainedModel::Rf(train_rf(windows, &c, normalizer)?)
        }
    })
}

fn patient_set<'a>(windows: impl IntoIterator<Item = &'a ObservationWindow>) -> Vec<String> {
    let s: BTreeSet<&str> = windows.into_iter().map(|w| w.patient_id.as_str()).collect();
    s.into_iter().map(str::to_string).collect()
}

fn normalized(w: &ObservationWindow, n: &Normalizer) -> ObservationWindow {
    let mut w = w.clone();
    n.apply_in_place(&mut w.input);
    w
}

pub enum FoldOutcome {
    Done(FoldResult, TrainedModel),
    Skipped(SkippedFold),
}

/// Builds the subset, fits the normalizer, trains and predicts one fold.
pub fn run_fold(
    cohort: &Cohort,
    data: &FoldData,
    config: &ExperimentConfig,
    scaler: Option<&MetricScaler>,
    seed_value: u64,
) -> Result<FoldOutcome> {
    let fold_idx = data.fold.index as u64;
    let test_id = &data.fold.test_patient_id;
    let subset_seed = seed::derive(seed_value, &[purpose::SUBSET, fold_idx]);
    let subset = match build_subset(cohort, data, &config.personalization, scaler, subset_seed) {
        Ok(s) => s,
        Err(e @ (Error::NoPositiveInstances | Error::InsufficientDonors { .. })) => {
            warn!("skipping fold {test_id} (seed {seed_value}): {e}");
            return Ok(FoldOutcome::Skipped(SkippedFold {
                seed: seed_value,
                patient_id: test_id.clone(),
                reason: e.to_string(),
            }));
        }
        Err(e) => return Err(e),
    };
    let raw = subset.windows(&data.training);
    let normalizer = fit_normalizer(
        raw.iter().flat_map(|w| w.day_rows()),
        format!("fold {fold_idx} seed {seed_value}"),
    )?;
    let training_patients = patient_set(raw.iter().copied());
    let normalizer_patients = training_patients.clone();
    if training_patients.contains(test_id) || normalizer_patients.contains(test_id) {
        return Err(Error::Leakage(format!(
            "fold {fold_idx}: test patient '{test_id}' present in training data"
        )));
    }
    let train_windows: Vec<ObservationWindow> =
        raw.iter().map(|w| normalized(w, &normalizer)).collect();
    let refs: Vec<&ObservationWindow> = train_windows.iter().collect();
    let train_seed = seed::derive(seed_value, &[purpose::TRAIN, fold_idx]);
    let model = train_model(&config.model, &refs, &normalizer, train_seed)?;
    let mut predictions = Vec::with_capacity(data.test.len());
    for w in &data.test {
        let (probability, prediction) = model.predict(&normalized(w, &normalizer))?;
        predictions.push(WeeklyPrediction {
            window_start: w.window_start,
            target_week_start: w.target_week_start,
            probability,
            prediction,
            label: w.label,
        });
    }
    predictions.sort_by_key(|p| p.window_start);
    Ok(FoldOutcome::Done(
        FoldResult {
            test_patient_id: test_id.clone(),
            fold: data.fold.index,
            seed: seed_value,
            predictions,
            training_patients,
            normalizer_patients,
            sampled_donors: subset.sampled_donors(&data.training),
            n_training_windows: subset.len(),
        },
        model,
    ))
}

pub fn needs_scaler(mode: &PersonalizationMode) -> bool {
    matches!(
        mode,
        PersonalizationMode::Metric {
            metric: PersonalizationMetric::Combined
        } | PersonalizationMode::Stratified {
            metric: PersonalizationMetric::Combined,
            ..
        }
    )
}

/// Runs every selected fold under every seed. Folds are prepared one at a
/// time and seeds fan out on the current rayon pool; results are ordered by
/// `(seed, fold)` regardless of scheduling.
pub fn run_experiment(cohort: &Cohort, config: &ExperimentConfig) -> Result<ExperimentRun> {
    if config.seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one seed is required".into(),
        ));
    }
    config.window.validate()?;
    let scaler = if needs_scaler(&config.personalization) {
        Some(MetricScaler::fit(&cohort.patients)?)
    } else {
        None
    };
    let folds = lopo_folds(cohort)?;
    let selected: Vec<&Fold> = match &config.test_patients {
        Some(ids) => {
            for id in ids {
                if cohort.patient(id).is_none() {
                    return Err(Error::InvalidArgument(format!(
                        "unknown test patient '{id}'"
                    )));
                }
            }
            folds
                .iter()
                .filter(|f| ids.contains(&f.test_patient_id))
                .collect()
        }
        None => folds.iter().collect(),
    };
    let days = build_day_vectors(cohort);
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for fold in selected {
        let data = prepare_fold(cohort, &days, fold, config)?;
        let outcomes: Vec<Result<FoldOutcome>> = config
            .seeds
            .par_iter()
            .map(|&s| run_fold(cohort, &data, config, scaler.as_ref(), s))
            .collect();
        for o in outcomes {
            match o? {
                FoldOutcome::Done(r, _) => results.push(r),
                FoldOutcome::Skipped(s) => skipped.push(s),
            }
        }
    }
    results.sort_by_key(|r| (r.seed, r.fold));
    skipped.sort_by(|a, b| (a.seed, &a.patient_id).cmp(&(b.seed, &b.patient_id)));
    assert_no_leakage(&results)?;
    let report = MetricsReport::from_folds(&results, &config.seeds, skipped);
    Ok(ExperimentRun {
        folds: results,
        report,
    })
}

/// Structural check that no fold trained or normalized on its test patient.
pub fn assert_no_leakage(results: &[FoldResult]) -> Result<()> {
    for r in results {
        let id = &r.test_patient_id;
        if r.training_patients.contains(id)
            || r.normalizer_patients.contains(id)
            || r.sampled_donors.contains(id)
        {
            return Err(Error::Leakage(format!(
                "fold {} seed {}: test patient '{id}' in training provenance",
                r.fold, r.seed
            )));
        }
    }
    Ok(())
}
