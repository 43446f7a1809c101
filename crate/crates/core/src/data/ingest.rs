use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;

use super::{Cohort, HourValues, PatientProfile, RelapseEvent, MODALITIES, MODALITY_COUNT};
use crate::error::{Error, Result};

pub const PATIENTS_HEADER: [&str; 6] = ["patient_id", "age", "bprs", "sfs", "cdss", "gpts"];
pub const SENSING_HEADER: [&str; 9] = [
    "patient_id",
    "date",
    "hour",
    "light",
    "volume",
    "conversation",
    "distance",
    "acc",
    "screen",
];
pub const RELAPSES_HEADER: [&str; 2] = ["patient_id", "relapse_date"];

/// A named CSV input.
pub struct CsvSource<R> {
    pub name: String,
    pub reader: R,
}

impl<R: Read> CsvSource<R> {
    pub fn new(name: impl Into<String>, reader: R) -> Self {
        CsvSource {
            name: name.into(),
            reader,
        }
    }
}

fn invalid(file: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Validation {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn reader<R: Read>(src: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(src)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, file: &str, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(invalid(
            file,
            1,
            format!(
                "expected header '{}', found '{}'",
                expected.join(","),
                got.join(",")
            ),
        ));
    }
    Ok(())
}

fn parse_number(file: &str, line: u64, field: &str, raw: &str) -> Result<Option<f64>> {
    if raw.is_empty() {
        return Ok(None);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| invalid(file, line, format!("non-numeric {field} '{raw}'")))?;
    if !v.is_finite() {
        return Err(invalid(file, line, format!("non-finite {field} '{raw}'")));
    }
    Ok(Some(v))
}

fn parse_date(file: &str, line: u64, raw: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| {
        invalid(
            file,
            line,
            format!("invalid date '{raw}' (expected YYYY-MM-DD)"),
        )
    })
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn read_patients<R: Read>(src: CsvSource<R>) -> Result<Vec<PatientProfile>> {
    let file = src.name;
    let mut rdr = reader(src.reader);
    check_header(&mut rdr, &file, &PATIENTS_HEADER)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(invalid(&file, line, "empty patient_id"));
        }
        if !seen.insert(id.clone()) {
            return Err(invalid(&file, line, format!("duplicate patient_id '{id}'")));
        }
        let age = parse_number(&file, line, "age", &rec[1])?
            .ok_or_else(|| invalid(&file, line, "missing age"))?;
        if age <= 0.0 {
            return Err(invalid(
                &file,
                line,
                format!("age must be positive, got {age}"),
            ));
        }
        out.push(PatientProfile {
            patient_id: id,
            age,
            bprs: parse_number(&file, line, "bprs", &rec[2])?,
            sfs: parse_number(&file, line, "sfs", &rec[3])?,
            cdss: parse_number(&file, line, "cdss", &rec[4])?,
            gpts: parse_number(&file, line, "gpts", &rec[5])?,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{file}: empty cohort")));
    }
    out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(out)
}

type Accum = BTreeMap<String, BTreeMap<(NaiveDate, u8), [(f64, u32); MODALITY_COUNT]>>;

fn read_sensing<R: Read>(
    src: CsvSource<R>,
    known: &BTreeSet<&str>,
) -> Result<BTreeMap<String, BTreeMap<(NaiveDate, u8), HourValues>>> {
    let file = src.name;
    let mut rdr = reader(src.reader);
    check_header(&mut rdr, &file, &SENSING_HEADER)?;
    let mut acc: Accum = BTreeMap::new();
    let mut rows = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        rows += 1;
        let id = &rec[0];
        if !known.contains(id) {
            return Err(invalid(&file, line, format!("unknown patient_id '{id}'")));
        }
        let date = parse_date(&file, line, &rec[1])?;
        let hour: i64 = rec[2]
            .parse()
            .map_err(|_| invalid(&file, line, format!("non-numeric hour '{}'", &rec[2])))?;
        if !(0..24).contains(&hour) {
            return Err(invalid(&file, line, format!("hour {hour} outside [0, 23]")));
        }
        let slot = acc
            .entry(id.to_string())
            .or_default()
            .entry((date, hour as u8))
            .or_insert([(0.0, 0); MODALITY_COUNT]);
        for (k, m) in MODALITIES.iter().enumerate() {
            if let Some(v) = parse_number(&file, line, m.name(), &rec[3 + k])? {
                if m.is_non_negative() && v < 0.0 {
                    return Err(invalid(
                        &file,
                        line,
                        format!("negative {} value {v}", m.name()),
                    ));
                }
                slot[k].0 += v;
                slot[k].1 += 1;
            }
        }
    }
    if rows == 0 {
        return Err(Error::Data(format!("{file}: no sensing rows")));
    }
    Ok(acc
        .into_iter()
        .map(|(id, hours)| {
            let hours = hours
                .into_iter()
                .map(|(k, sums)| {
                    let vals = sums.map(|(s, n)| if n == 0 { None } else { Some(s / n as f64) });
                    (k, vals)
                })
                .collect();
            (id, hours)
        })
        .collect())
}

fn read_relapses<R: Read>(
    src: CsvSource<R>,
    known: &BTreeSet<&str>,
    hourly: &BTreeMap<String, BTreeMap<(NaiveDate, u8), HourValues>>,
) -> Result<Vec<RelapseEvent>> {
    let file = src.name;
    let mut rdr = reader(src.reader);
    check_header(&mut rdr, &file, &RELAPSES_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let id = &rec[0];
        if !known.contains(id) {
            return Err(invalid(&file, line, format!("unknown patient_id '{id}'")));
        }
        let date = parse_date(&file, line, &rec[1])?;
        let span = hourly.get(id).and_then(|m| {
            let first = m.keys().next()?.0;
            let last = m.keys().next_back()?.0;
            Some((first, last))
        });
        match span {
            Some((first, last)) if date >= first && date <= last => {}
            Some((first, last)) => {
                return Err(invalid(
                    &file,
                    line,
                    format!("relapse date {date} outside monitoring span {first}..{last}"),
                ))
            }
            None => {
                return Err(invalid(
                    &file,
                    line,
                    format!("relapse for '{id}' who has no sensing data"),
                ))
            }
        }
        out.push(RelapseEvent {
            patient_id: id.to_string(),
            relapse_date: date,
        });
    }
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn ingest_cohort_from_readers<A: Read, B: Read, C: Read>(
    patients: CsvSource<A>,
    sensing: CsvSource<B>,
    relapses: CsvSource<C>,
) -> Result<Cohort> {
    let patients = read_patients(patients)?;
    let known: BTreeSet<&str> = patients.iter().map(|p| p.patient_id.as_str()).collect();
    let hourly = read_sensing(sensing, &known)?;
    let relapses = read_relapses(relapses, &known, &hourly)?;
    Ok(Cohort {
        patients,
        hourly,
        relapses,
    })
}

fn open(path: &Path) -> Result<CsvSource<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(CsvSource::new(path.display().to_string(), f))
}

pub fn ingest_cohort(patients: &Path, sensing: &Path, relapses: &Path) -> Result<Cohort> {
    ingest_cohort_from_readers(open(patients)?, open(sensing)?, open(relapses)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PATIENTS: &str = "patient_id,age,bprs,sfs,cdss,gpts\nA,30,20,110,3,40\nB,45,25,95,,50\n";
    const RELAPSES: &str = "patient_id,relapse_date\n";

    fn ingest(p: &str, s: &str, r: &str) -> Result<Cohort> {
        ingest_cohort_from_readers(
            CsvSource::new("patients.csv", p.as_bytes()),
            CsvSource::new("sensing.csv", s.as_bytes()),
            CsvSource::new("relapses.csv", r.as_bytes()),
        )
    }

    fn sensing(rows: &[&str]) -> String {
        let mut s = SENSING_HEADER.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn duplicates_are_averaged() {
        let s = sensing(&["A,2020-01-01,5,2,,,,,", "A,2020-01-01,5,4,1,,,,"]);
        let c = ingest(PATIENTS, &s, RELAPSES).unwrap();
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let v = c.hourly["A"][&(d, 5)];
        assert_eq!(v[0], Some(3.0));
        assert_eq!(v[1], Some(1.0));
        assert_eq!(v[2], None);
        assert_eq!(c.patients[1].cdss, None);
    }

    #[test]
    fn empty_sensing_is_error() {
        let err = ingest(PATIENTS, &sensing(&[]), RELAPSES).unwrap_err();
        assert!(err.to_string().contains("no sensing rows"), "{err}");
    }

    #[test]
    fn empty_cohort_is_error() {
        let err = ingest(
            "patient_id,age,bprs,sfs,cdss,gpts\n",
            &sensing(&[]),
            RELAPSES,
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty cohort"), "{err}");
    }

    #[test]
    fn unknown_patient_reports_line() {
        let s = sensing(&["A,2020-01-01,5,2,,,,,", "Z,2020-01-01,5,2,,,,,"]);
        match ingest(PATIENTS, &s, RELAPSES).unwrap_err() {
            Error::Validation {
                file,
                line,
                message,
            } => {
                assert_eq!(file, "sensing.csv");
                assert_eq!(line, 3);
                assert!(message.contains("unknown"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_hour_and_values_rejected() {
        for row in [
            "A,2020-01-01,24,2,,,,,",
            "A,2020-01-01,-1,2,,,,,",
            "A,2020-01-01,3,abc,,,,,",
            "A,2020-01-01,3,1,,-5,,,",
            "A,2020-13-01,3,1,,,,,",
        ] {
            let err = ingest(PATIENTS, &sensing(&[row]), RELAPSES).unwrap_err();
            assert!(
                matches!(err, Error::Validation { line: 2, .. }),
                "{row}: {err}"
            );
        }
    }

    #[test]
    fn relapse_must_fall_in_span() {
        let s = sensing(&["A,2020-01-01,5,2,,,,,", "A,2020-01-10,5,2,,,,,"]);
        assert!(ingest(PATIENTS, &s, "patient_id,relapse_date\nA,2020-01-05\n").is_ok());
        assert!(ingest(PATIENTS, &s, "patient_id,relapse_date\nA,2020-02-05\n").is_err());
        assert!(ingest(PATIENTS, &s, "patient_id,relapse_date\nB,2020-01-05\n").is_err());
    }

    #[test]
    fn wrong_header_rejected() {
        let err = ingest("id,age\nA,3\n", &sensing(&[]), RELAPSES).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 1, .. }));
    }
}
