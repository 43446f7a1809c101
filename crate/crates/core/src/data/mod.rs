//! Cohort data: ingest, hourly day vectors, imputation, normalization and
//! labeled observation windows.

mod days;
mod ingest;
mod normalize;
mod windows;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use days::{
    build_day_vectors, fit_reference_stats, impute_missing, DayVector, PatientDays, ReferenceStats,
};
pub use ingest::{ingest_cohort, ingest_cohort_from_readers, CsvSource};
pub use normalize::{apply_normalizer, fit_normalizer, Normalizer};
pub use windows::{
    label_week, make_windows, ModalitySelection, ObservationWindow, WindowConfig, WindowSet,
    TARGET_WEEK_DAYS,
};

pub const HOURS: usize = 24;
pub const MODALITY_COUNT: usize = 6;
pub const DAY_DIM: usize = HOURS * MODALITY_COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Light,
    Volume,
    Conversation,
    Distance,
    Acc,
    Screen,
}

pub const MODALITIES: [Modality; MODALITY_COUNT] = [
    Modality::Light,
    Modality::Volume,
    Modality::Conversation,
    Modality::Distance,
    Modality::Acc,
    Modality::Screen,
];

impl Modality {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Light => "light",
            Modality::Volume => "volume",
            Modality::Conversation => "conversation",
            Modality::Distance => "distance",
            Modality::Acc => "acc",
            Modality::Screen => "screen",
        }
    }

    /// Durations, distances and usage counts cannot be negative.
    pub fn is_non_negative(self) -> bool {
        matches!(
            self,
            Modality::Conversation | Modality::Distance | Modality::Screen
        )
    }

    /// Position of `(hour, modality)` in the hour-major day vector.
    pub fn day_index(self, hour: usize) -> usize {
        hour * MODALITY_COUNT + self.index()
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MODALITIES
            .iter()
            .copied()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality '{s}'")))
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Demographics and baseline questionnaire scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: String,
    pub age: f64,
    pub bprs: Option<f64>,
    pub sfs: Option<f64>,
    pub cdss: Option<f64>,
    pub gpts: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RelapseEvent {
    pub patient_id: String,
    pub relapse_date: NaiveDate,
}

/// Hourly modality values, `None` where unobserved.
pub type HourValues = [Option<f64>; MODALITY_COUNT];

/// A validated cohort. Patients are sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientProfile>,
    /// patient id -> (date, hour) -> averaged values.
    pub hourly: BTreeMap<String, BTreeMap<(NaiveDate, u8), HourValues>>,
    pub relapses: Vec<RelapseEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub relapse_patients: usize,
    pub relapse_instances: usize,
    pub sensing_hours: usize,
    pub observed_values: usize,
    /// Observed values over the hour x modality slots of every monitored day.
    pub coverage: f64,
}

impl Cohort {
    pub fn patient(&self, id: &str) -> Option<&PatientProfile> {
        self.patients
            .binary_search_by(|p| p.patient_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.patients[i])
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.patient_id.clone()).collect()
    }

    pub fn relapse_dates(&self, id: &str) -> Vec<NaiveDate> {
        self.relapses
            .iter()
            .filter(|r| r.patient_id == id)
            .map(|r| r.relapse_date)
            .collect()
    }

    pub fn relapse_patient_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.relapses.iter().map(|r| r.patient_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn summary(&self) -> CohortSummary {
        let sensing_hours = self.hourly.values().map(|m| m.len()).sum();
        let observed_values = self
            .hourly
            .values()
            .flat_map(|m| m.values())
            .map(|v| v.iter().filter(|x| x.is_some()).count())
            .sum();
        let monitored_days: i64 = self
            .hourly
            .values()
            .filter_map(|m| {
                let first = m.keys().next()?.0;
                let last = m.keys().next_back()?.0;
                Some((last - first).num_days() + 1)
            })
            .sum();
        let slots = monitored_days.max(1) as f64 * DAY_DIM as f64;
        CohortSummary {
            patients: self.patients.len(),
            relapse_patients: self.relapse_patient_ids().len(),
            relapse_instances: self.relapses.len(),
            sensing_hours,
            observed_values,
            coverage: observed_values as f64 / slots,
        }
    }
}
