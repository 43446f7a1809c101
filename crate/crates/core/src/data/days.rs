use chrono::{Days, NaiveDate};

use super::{Cohort, DAY_DIM, MODALITY_COUNT};
use crate::error::{Error, Result};

/// One calendar day: hour-major 144 values (hour 0 light..screen, hour 1 ...)
/// and a mask of which entries were observed.
#[derive(Clone, Debug, PartialEq)]
pub struct DayVector {
    pub date: NaiveDate,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl DayVector {
    pub fn empty(date: NaiveDate) -> Self {
        DayVector {
            date,
            values: vec![0.0; DAY_DIM],
            observed: vec![false; DAY_DIM],
        }
    }

    pub fn is_fully_masked(&self) -> bool {
        self.observed.iter().all(|o| !o)
    }
}

/// Consecutive calendar days of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientDays {
    pub patient_id: String,
    pub days: Vec<DayVector>,
}

impl PatientDays {
    pub fn first_date(&self) -> Option<NaiveDate> {
        self.days.first().map(|d| d.date)
    }
}

/// One day vector per calendar day between each patient's first and last
/// observed date; unobserved hours are masked. Patients are in id order.
pub fn build_day_vectors(cohort: &Cohort) -> Vec<PatientDays> {
    cohort
        .patients
        .iter()
        .map(|p| {
            let days = match cohort.hourly.get(&p.patient_id) {
                Some(hours) if !hours.is_empty() => {
                    let first = hours.keys().next().expect("non-empty").0;
                    let last = hours.keys().next_back().expect("non-empty").0;
                    let n = (last - first).num_days() as usize + 1;
                    let mut days: Vec<DayVector> = (0..n)
                        .map(|i| DayVector::empty(first + Days::new(i as u64)))
                        .collect();
                    for (&(date, hour), vals) in hours {
                        let day = &mut days[(date - first).num_days() as usize];
                        for (m, v) in vals.iter().enumerate() {
                            if let Some(v) = v {
                                let idx = hour as usize * MODALITY_COUNT + m;
                                day.values[idx] = *v;
                                day.observed[idx] = true;
                            }
                        }
                    }
                    days
                }
                _ => Vec::new(),
            };
            PatientDays {
                patient_id: p.patient_id.clone(),
                days,
            }
        })
        .collect()
}

/// Per-dimension medians over the observed entries of a training cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceStats {
    pub medians: Vec<Option<f64>>,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn observed_medians<'a>(days: impl Iterator<Item = &'a DayVector>) -> Vec<Option<f64>> {
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); DAY_DIM];
    for d in days {
        for (k, col) in cols.iter_mut().enumerate() {
            if d.observed[k] {
                col.push(d.values[k]);
            }
        }
    }
    cols.iter_mut().map(|c| median(c)).collect()
}

pub fn fit_reference_stats(training: &[&PatientDays]) -> Result<ReferenceStats> {
    let medians = observed_medians(training.iter().flat_map(|p| p.days.iter()));
    if medians.iter().all(Option::is_none) {
        return Err(Error::Data(
            "reference statistics are empty: no observed training values".into(),
        ));
    }
    Ok(ReferenceStats { medians })
}

/// Fills masked entries with the patient's own per-(hour, modality) median,
/// falling back to the training-cohort median (or 0 if the cohort never
/// observed that slot). Masks are preserved.
pub fn impute_missing(patient: &PatientDays, reference: &ReferenceStats) -> Result<PatientDays> {
    if reference.medians.len() != DAY_DIM || reference.medians.iter().all(Option::is_none) {
        return Err(Error::Data("reference statistics are empty".into()));
    }
    let own = observed_medians(patient.days.iter());
    let fill: Vec<f64> = own
        .iter()
        .zip(&reference.medians)
        .map(|(o, r)| o.or(*r).unwrap_or(0.0))
        .collect();
    let days = patient
        .days
        .iter()
        .map(|d| {
            let mut d = d.clone();
            for k in 0..DAY_DIM {
                if !d.observed[k] {
                    d.values[k] = fill[k];
                }
            }
            d
        })
        .collect();
    Ok(PatientDays {
        patient_id: patient.patient_id.clone(),
        days,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ingest_cohort_from_readers, CsvSource, Modality};

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 3, d).unwrap()
    }

    fn cohort(rows: &str) -> Cohort {
        let sensing =
            format!("patient_id,date,hour,light,volume,conversation,distance,acc,screen\n{rows}");
        ingest_cohort_from_readers(
            CsvSource::new(
                "p",
                "patient_id,age,bprs,sfs,cdss,gpts\nA,30,1,1,1,1\n".as_bytes(),
            ),
            CsvSource::new("s", sensing.as_bytes()),
            CsvSource::new("r", "patient_id,relapse_date\n".as_bytes()),
        )
        .unwrap()
    }

    #[test]
    fn full_day_is_hour_major() {
        let mut rows = String::new();
        for h in 0..24 {
            rows.push_str(&format!(
                "A,2021-03-01,{h},{},{},{},{},{},{}\n",
                h,
                h + 100,
                h + 200,
                h + 300,
                h + 400,
                h + 500
            ));
        }
        let days = build_day_vectors(&cohort(&rows));
        let d = &days[0].days[0];
        assert!(d.observed.iter().all(|&o| o));
        assert_eq!(d.values[0], 0.0);
        assert_eq!(d.values[Modality::Conversation.day_index(3)], 203.0);
        assert_eq!(d.values[Modality::Screen.day_index(23)], 523.0);
        assert_eq!(d.values[6], 1.0);
    }

    #[test]
    fn gaps_produce_masked_days() {
        let days = build_day_vectors(&cohort("A,2021-03-01,0,1,,,,,\nA,2021-03-05,0,1,,,,,\n"));
        let d = &days[0].days;
        assert_eq!(d.len(), 5);
        assert_eq!(d.iter().filter(|x| x.is_fully_masked()).count(), 3);
        assert_eq!(d[4].date, date(5));
    }

    #[test]
    fn imputation_rules() {
        let rows = "A,2021-03-01,9,10,,,,,\nA,2021-03-02,9,30,,,,,\nA,2021-03-03,9,20,,,,,\nA,2021-03-04,0,1,,,,,\n";
        let days = build_day_vectors(&cohort(rows));
        let p = &days[0];
        let mut reference = ReferenceStats {
            medians: vec![None; DAY_DIM],
        };
        reference.medians[Modality::Conversation.day_index(9)] = Some(42.0);
        let imputed = impute_missing(p, &reference).unwrap();
        let light9 = Modality::Light.day_index(9);
        assert_eq!(imputed.days[3].values[light9], 20.0);
        assert!(!imputed.days[3].observed[light9]);
        assert_eq!(imputed.days[0].values[light9], 10.0);
        assert_eq!(
            imputed.days[0].values[Modality::Conversation.day_index(9)],
            42.0
        );
    }

    #[test]
    fn fully_observed_is_identity() {
        let mut rows = String::new();
        for h in 0..24 {
            rows.push_str(&format!("A,2021-03-01,{h},1,2,3,4,5,6\n"));
        }
        let p = &build_day_vectors(&cohort(&rows))[0];
        let reference = fit_reference_stats(&[p]).unwrap();
        assert_eq!(&impute_missing(p, &reference).unwrap(), p);
    }

    #[test]
    fn empty_reference_is_error() {
        let p = &build_day_vectors(&cohort("A,2021-03-01,0,1,,,,,\n"))[0];
        let reference = ReferenceStats {
            medians: vec![None; DAY_DIM],
        };
        assert!(impute_missing(p, &reference).is_err());
    }
}
