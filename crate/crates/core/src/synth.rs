//! Seeded synthetic cohorts.
//!
//! Each patient has a latent social-functioning trait `z ~ N(0, 1)`. The SFS
//! score is `120 + 12 z`, the other baseline scores correlate with `z` at 0.4,
//! and `z` shifts the conversation, volume and distance baselines by
//! `trait_effect * z` modality standard deviations. For relapsing patients
//! the `prodrome_days` before the relapse shift the same three modalities
//! down by `drift_effect` standard deviations.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Modality, ObservationWindow, DAY_DIM, HOURS, MODALITIES, MODALITY_COUNT};
use crate::error::{Error, Result};
use crate::seed::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub days_per_patient: usize,
    pub relapse_fraction: f64,
    pub prodrome_days: usize,
    pub trait_effect: f64,
    pub drift_effect: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_patients: 40,
            days_per_patient: 182,
            relapse_fraction: 0.3,
            prodrome_days: 30,
            trait_effect: 1.5,
            drift_effect: 1.5,
            missing_rate: 0.05,
            seed: 1,
        }
    }
}

/// Earliest relapse day index; leaves room for a full observation history.
pub const FIRST_RELAPSE_DAY: usize = 60;
const STUDY_START: (i32, u32, u32) = (2019, 1, 7);

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::InvalidArgument("n_patients must be positive".into()));
        }
        if self.days_per_patient == 0 || self.prodrome_days == 0 {
            return Err(Error::InvalidArgument(
                "days_per_patient and prodrome_days must be positive".into(),
            ));
        }
        for (name, p) in [
            ("relapse_fraction", self.relapse_fraction),
            ("missing_rate", self.missing_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.relapse_count() > 0 && self.days_per_patient < FIRST_RELAPSE_DAY + 8 {
            return Err(Error::InvalidArgument(format!(
                "relapsing cohorts need at least {} days per patient",
                FIRST_RELAPSE_DAY + 8
            )));
        }
        if !self.trait_effect.is_finite() || !self.drift_effect.is_finite() {
            return Err(Error::InvalidArgument("effects must be finite".into()));
        }
        Ok(())
    }

    /// Exactly `round(fraction * n)` patients relapse.
    pub fn relapse_count(&self) -> usize {
        ((self.relapse_fraction * self.n_patients as f64).round() as usize).min(self.n_patients)
    }
}

/// Circadian baseline and noise level of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorProfile {
    pub baseline: [[f64; HOURS]; MODALITY_COUNT],
    pub noise_std: [f64; MODALITY_COUNT],
    /// Additive per-modality offsets for one patient.
    pub offsets: [f64; MODALITY_COUNT],
}

/// Modalities that carry both the trait offset and the prodromal drift.
pub fn is_behavioral(m: Modality) -> bool {
    matches!(
        m,
        Modality::Conversation | Modality::Volume | Modality::Distance
    )
}

fn activity(hour: usize) -> f64 {
    if (8..22).contains(&hour) {
        1.0
    } else {
        0.2
    }
}

fn daylight(hour: usize) -> f64 {
    if (6..=18).contains(&hour) {
        (std::f64::consts::PI * (hour as f64 - 6.0) / 12.0).sin()
    } else {
        0.0
    }
}

impl BehaviorProfile {
    pub fn population() -> Self {
        let mut baseline = [[0.0; HOURS]; MODALITY_COUNT];
        for h in 0..HOURS {
            let a = activity(h);
            baseline[Modality::Light.index()][h] = 50.0 + 250.0 * daylight(h);
            baseline[Modality::Volume.index()][h] = 20.0 + 30.0 * a;
            baseline[Modality::Conversation.index()][h] = 400.0 * a;
            baseline[Modality::Distance.index()][h] = 500.0 * a;
            baseline[Modality::Acc.index()][h] = 1.0 + 0.5 * a;
            baseline[Modality::Screen.index()][h] = 600.0 * a;
        }
        BehaviorProfile {
            baseline,
            noise_std: [40.0, 8.0, 120.0, 200.0, 0.3, 250.0],
            offsets: [0.0; MODALITY_COUNT],
        }
    }

    /// Trait-coupled profile of one patient plus idiosyncratic offsets.
    pub fn for_patient<R: Rng + ?Sized>(trait_z: f64, trait_effect: f64, rng: &mut R) -> Self {
        let mut p = BehaviorProfile::population();
        for m in MODALITIES {
            let k = m.index();
            let idio: f64 = rng.sample::<f64, _>(StandardNormal) * 0.3;
            let coupled = is_behavioral(m);
            let t = if coupled { trait_effect * trait_z } else { 0.0 };
            p.offsets[k] = (t + idio) * p.noise_std[k];
        }
        p
    }
}

/// The three CSV payloads of a cohort.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CohortFiles {
    pub patients_csv: String,
    pub sensing_csv: String,
    pub relapses_csv: String,
}

impl CohortFiles {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("patients.csv", &self.patients_csv),
            ("sensing.csv", &self.sensing_csv),
            ("relapses.csv", &self.relapses_csv),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn correlated<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    const RHO: f64 = 0.4;
    let e: f64 = rng.sample(StandardNormal);
    RHO * z + (1.0 - RHO * RHO).sqrt() * e
}

fn sample_age<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let normal = Normal::new(37.2, 13.7).expect("valid normal");
    loop {
        let a: f64 = normal.sample(rng);
        if (18.0..=70.0).contains(&a) {
            return a;
        }
    }
}

pub fn patient_id(i: usize) -> String {
    format!("S{:03}", i + 1)
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<CohortFiles> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..spec.n_patients).collect();
    order.shuffle(&mut seed::derived_rng(
        spec.seed,
        &[purpose::SYNTH, u64::MAX],
    ));
    let mut relapsing = vec![false; spec.n_patients];
    for &i in order.iter().take(spec.relapse_count()) {
        relapsing[i] = true;
    }

    let start =
        NaiveDate::from_ymd_opt(STUDY_START.0, STUDY_START.1, STUDY_START.2).expect("valid date");
    let mut patients = String::from("patient_id,age,bprs,sfs,cdss,gpts\n");
    let mut sensing =
        String::from("patient_id,date,hour,light,volume,conversation,distance,acc,screen\n");
    let mut relapses = String::from("patient_id,relapse_date\n");

    for i in 0..spec.n_patients {
        let mut rng = seed::derived_rng(spec.seed, &[purpose::SYNTH, i as u64]);
        let id = patient_id(i);
        let age = sample_age(&mut rng);
        let z: f64 = rng.sample(StandardNormal);
        let sfs = 120.0 + 12.0 * z;
        let bprs = (35.0 + 8.0 * correlated(z, &mut rng)).max(18.0);
        let cdss = (4.0 + 3.0 * correlated(z, &mut rng)).max(0.0);
        let gpts = (60.0 + 20.0 * correlated(z, &mut rng)).max(32.0);
        let _ = writeln!(
            patients,
            "{id},{age:.1},{bprs:.1},{sfs:.1},{cdss:.1},{gpts:.1}"
        );

        let profile = BehaviorProfile::for_patient(z, spec.trait_effect, &mut rng);
        let first = start + Days::new(rng.gen_range(0..28));
        let relapse_day = if relapsing[i] {
            Some(rng.gen_range(FIRST_RELAPSE_DAY..=spec.days_per_patient - 8))
        } else {
            None
        };
        if let Some(r) = relapse_day {
            let _ = writeln!(relapses, "{id},{}", first + Days::new(r as u64));
        }

        for d in 0..spec.days_per_patient {
            let date = first + Days::new(d as u64);
            let in_prodrome = relapse_day
                .map(|r| d < r && d + spec.prodrome_days >= r)
                .unwrap_or(false);
            let day_effect: [f64; MODALITY_COUNT] = std::array::from_fn(|k| {
                rng.sample::<f64, _>(StandardNormal) * 0.5 * profile.noise_std[k]
            });
            for h in 0..HOURS {
                let mut row = format!("{id},{date},{h}");
                let mut any = false;
                for m in MODALITIES {
                    let k = m.index();
                    let std = profile.noise_std[k];
                    let mut v = profile.baseline[k][h]
                        + profile.offsets[k]
                        + day_effect[k]
                        + rng.sample::<f64, _>(StandardNormal) * std;
                    if in_prodrome && is_behavioral(m) {
                        v -= spec.drift_effect * std;
                    }
                    let v = v.max(0.0);
                    let dropped = spec.missing_rate > 0.0 && rng.gen::<f64>() < spec.missing_rate;
                    if dropped {
                        row.push(',');
                    } else {
                        any = true;
                        let _ = write!(row, ",{v:.3}");
                    }
                }
                if any {
                    sensing.push_str(&row);
                    sensing.push('\n');
                }
            }
        }
    }
    Ok(CohortFiles {
        patients_csv: patients,
        sensing_csv: sensing,
        relapses_csv: relapses,
    })
}

/// Generates and ingests in one step.
pub fn generate_and_ingest(spec: &CohortSpec) -> Result<crate::data::Cohort> {
    let files = generate_cohort(spec)?;
    crate::data::ingest_cohort_from_readers(
        crate::data::CsvSource::new("patients.csv", files.patients_csv.as_bytes()),
        crate::data::CsvSource::new("sensing.csv", files.sensing_csv.as_bytes()),
        crate::data::CsvSource::new("relapses.csv", files.relapses_csv.as_bytes()),
    )
}

/// Already-normalized windows whose conversation hours are lowered by
/// `shift` when positive; every other value is uniform in `[0.25, 0.75]`.
/// Alternating labels, patient ids `W000`, `W001`, ...
pub fn separable_windows(
    n: usize,
    days: usize,
    shift: f64,
    seed_value: u64,
) -> Vec<ObservationWindow> {
    let mut rng = seed::derived_rng(seed_value, &[purpose::SYNTH]);
    let start =
        NaiveDate::from_ymd_opt(STUDY_START.0, STUDY_START.1, STUDY_START.2).expect("valid date");
    (0..n)
        .map(|i| {
            let label = i % 2 == 1;
            let mut input: Vec<f64> = (0..days * DAY_DIM)
                .map(|_| rng.gen_range(0.25..0.75))
                .collect();
            if label {
                for day in input.chunks_exact_mut(DAY_DIM) {
                    for h in 0..HOURS {
                        day[Modality::Conversation.day_index(h)] -= shift;
                    }
                }
            }
            ObservationWindow {
                patient_id: format!("W{i:03}"),
                window_start: start,
                target_week_start: start + Days::new(days as u64),
                days,
                dim: DAY_DIM,
                input,
                label,
                masked_days: 0,
            }
        })
        .collect()
}
