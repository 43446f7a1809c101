use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{Modality, PatientDays, HOURS, MODALITIES};
use crate::error::{Error, Result};

pub const TARGET_WEEK_DAYS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Input span M in days.
    pub days: usize,
    pub step: usize,
    /// Days before a relapse whose weeks count as positive.
    pub horizon: usize,
    /// Windows with more than this fraction of fully-masked input days are dropped.
    pub missing_day_fraction_limit: f64,
    /// Target weeks starting within this many days after a relapse are dropped.
    pub post_relapse_exclusion: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            days: 28,
            step: 7,
            horizon: 30,
            missing_day_fraction_limit: 0.5,
            post_relapse_exclusion: 0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days == 0 || self.step == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument(
                "window days, step and horizon must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.missing_day_fraction_limit) {
            return Err(Error::InvalidArgument(
                "missing_day_fraction_limit must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Which modalities feed the model. Selected entries keep hour-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySelection {
    modalities: Vec<Modality>,
}

impl ModalitySelection {
    pub fn all() -> Self {
        ModalitySelection {
            modalities: MODALITIES.to_vec(),
        }
    }

    pub fn new(mut modalities: Vec<Modality>) -> Result<Self> {
        modalities.sort();
        modalities.dedup();
        if modalities.is_empty() {
            return Err(Error::InvalidArgument(
                "modality subset must be non-empty".into(),
            ));
        }
        Ok(ModalitySelection { modalities })
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn dim(&self) -> usize {
        HOURS * self.modalities.len()
    }

    pub fn is_all(&self) -> bool {
        self.modalities.len() == MODALITIES.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..HOURS)
            .flat_map(|h| self.modalities.iter().map(move |m| m.day_index(h)))
            .collect()
    }
}

impl std::fmt::Display for ModalitySelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.modalities.iter().map(|m| m.name()).collect();
        f.write_str(&names.join(","))
    }
}

/// `days` consecutive day vectors and the label of the following week.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationWindow {
    pub patient_id: String,
    pub window_start: NaiveDate,
    pub target_week_start: NaiveDate,
    pub days: usize,
    pub dim: usize,
    /// `days x dim`, row per day.
    pub input: Vec<f64>,
    pub label: bool,
    pub masked_days: usize,
}

impl ObservationWindow {
    pub fn day(&self, t: usize) -> &[f64] {
        &self.input[t * self.dim..(t + 1) * self.dim]
    }

    pub fn day_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.input.chunks_exact(self.dim)
    }

    /// Mean over the time axis.
    pub fn time_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.day_rows() {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.days as f64);
        m
    }

    pub fn label_f64(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<ObservationWindow>,
    pub dropped_low_coverage: usize,
    pub excluded_post_relapse: usize,
}

/// Positive iff `[start, start + 6]` intersects `[r - horizon, r]` for some relapse `r`.
pub fn label_week(
    target_week_start: NaiveDate,
    relapse_dates: &[NaiveDate],
    horizon: usize,
) -> bool {
    let week_end = target_week_start + Days::new(TARGET_WEEK_DAYS as u64 - 1);
    relapse_dates.iter().any(|&r| {
        let lo = r - Days::new(horizon as u64);
        target_week_start <= r && week_end >= lo
    })
}

/// Sliding windows anchored at the patient's first monitored day.
pub fn make_windows(
    patient: &PatientDays,
    relapse_dates: &[NaiveDate],
    config: &WindowConfig,
    selection: &ModalitySelection,
) -> Result<WindowSet> {
    config.validate()?;
    let n = patient.days.len();
    let span = config.days + TARGET_WEEK_DAYS;
    let idx = selection.indices();
    let mut set = WindowSet::default();
    if n < span {
        return Ok(set);
    }
    let max_masked = config.missing_day_fraction_limit * config.days as f64;
    let mut start = 0;
    while start + span <= n {
        let input_days = &patient.days[start..start + config.days];
        let target = patient.days[start + config.days].date;
        let masked = input_days.iter().filter(|d| d.is_fully_masked()).count();
        let excluded = config.post_relapse_exclusion > 0
            && relapse_dates.iter().any(|&r| {
                target > r && target <= r + Days::new(config.post_relapse_exclusion as u64)
            });
        if excluded {
            set.excluded_post_relapse += 1;
        } else if masked as f64 > max_masked {
            set.dropped_low_coverage += 1;
        } else {
            let mut input = Vec::with_capacity(config.days * idx.len());
            for d in input_days {
                input.extend(idx.iter().map(|&k| d.values[k]));
            }
            set.windows.push(ObservationWindow {
                patient_id: patient.patient_id.clone(),
                window_start: input_days[0].date,
                target_week_start: target,
                days: config.days,
                dim: idx.len(),
                input,
                label: label_week(target, relapse_dates, config.horizon),
                masked_days: masked,
            });
        }
        start += config.step;
    }
    Ok(set)
}
