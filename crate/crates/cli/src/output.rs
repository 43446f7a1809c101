//! Prediction files, artifact writing and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use relapse_core::eval::{FoldResult, WeeklyPrediction};

use crate::DataError;

pub const PREDICTIONS_HEADER: [&str; 7] = [
    "patient_id",
    "week_start",
    "probability",
    "prediction",
    "label",
    "seed",
    "fold",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub week_start: NaiveDate,
    pub probability: f64,
    pub prediction: u8,
    pub label: u8,
    pub seed: u64,
    pub fold: usize,
}

impl PredictionRow {
    pub fn key(&self) -> (&str, NaiveDate, u64) {
        (&self.patient_id, self.week_start, self.seed)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One row per prediction, ordered by seed, fold, then week.
pub fn prediction_rows(folds: &[FoldResult]) -> Vec<PredictionRow> {
    let mut rows: Vec<PredictionRow> = folds
        .iter()
        .flat_map(|f| {
            f.predictions.iter().map(move |p| PredictionRow {
                patient_id: f.test_patient_id.clone(),
                week_start: p.target_week_start,
                probability: p.probability,
                prediction: p.prediction as u8,
                label: p.label as u8,
                seed: f.seed,
                fold: f.fold,
            })
        })
        .collect();
    rows.sort_by(|a, b| (a.seed, a.fold, a.week_start).cmp(&(b.seed, b.fold, b.week_start)));
    rows
}

pub fn predictions_csv(rows: &[PredictionRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(PREDICTIONS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let bytes = std::fs::read(path)
        .map_err(|e| DataError(format!("cannot read {}: {e}", path.display())))?;
    parse_predictions(&bytes, &path.display().to_string())
}

pub fn parse_predictions(bytes: &[u8], name: &str) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| DataError(format!("{name}: {e}")))?;
    if header.iter().ne(PREDICTIONS_HEADER) {
        return Err(DataError(format!(
            "{name}:1: expected header {}, got {}",
            PREDICTIONS_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        ))
        .into());
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let bad = |msg: String| DataError(format!("{name}:{line}: {msg}"));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let flag = |k: usize| match field(k) {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            v => Err(bad(format!(
                "{} must be 0 or 1, got '{v}'",
                PREDICTIONS_HEADER[k]
            ))),
        };
        let patient_id = field(0).to_string();
        if patient_id.is_empty() {
            return Err(bad("empty patient_id".into()).into());
        }
        let week_start = NaiveDate::parse_from_str(field(1), "%Y-%m-%d")
            .map_err(|e| bad(format!("week_start '{}': {e}", field(1))))?;
        let probability: f64 = field(2)
            .parse()
            .map_err(|e| bad(format!("probability '{}': {e}", field(2))))?;
        if !(0.0..=1.0).contains(&probability) {
            return Err(bad(format!("probability {probability} outside [0, 1]")).into());
        }
        rows.push(PredictionRow {
            patient_id,
            week_start,
            probability,
            prediction: flag(3)?,
            label: flag(4)?,
            seed: field(5)
                .parse()
                .map_err(|e| bad(format!("seed '{}': {e}", field(5))))?,
            fold: field(6)
                .parse()
                .map_err(|e| bad(format!("fold '{}': {e}", field(6))))?,
        });
    }
    Ok(rows)
}

/// Regroups rows into fold results; training provenance is not recorded in
/// prediction files and is left empty.
pub fn folds_from_rows(rows: &[PredictionRow]) -> Vec<FoldResult> {
    let mut groups: BTreeMap<(u64, usize, &str), Vec<WeeklyPrediction>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.seed, r.fold, &r.patient_id))
            .or_default()
            .push(WeeklyPrediction {
                window_start: r.week_start,
                target_week_start: r.week_start,
                probability: r.probability,
                prediction: r.prediction == 1,
                label: r.label == 1,
            });
    }
    groups
        .into_iter()
        .map(|((seed, fold, id), mut predictions)| {
            predictions.sort_by_key(|p| p.target_week_start);
            FoldResult {
                test_patient_id: id.to_string(),
                fold,
                seed,
                predictions,
                training_patients: Vec::new(),
                normalizer_patients: Vec::new(),
                sampled_donors: Vec::new(),
                n_training_windows: 0,
            }
        })
        .collect()
}

pub fn seeds_of(rows: &[PredictionRow]) -> Vec<u64> {
    let mut s: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    s.sort_unstable();
    s.dedup();
    s
}

pub fn to_json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub config_digest: String,
    pub created_at: String,
    pub files: Vec<ManifestEntry>,
}

/// Collects artifacts in memory and writes them with a manifest.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn write(self, command: &str, config_digest: String) -> Result<Manifest> {
        std::fs::create_dir_all(&self.dir)
            .with_context(|| format!("cannot create output directory {}", self.dir.display()))?;
        let mut entries = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            std::fs::write(&path, bytes)
                .with_context(|| format!("cannot write {}", path.display()))?;
            entries.push(ManifestEntry {
                file: name.clone(),
                bytes: bytes.len(),
                sha256: sha256_hex(bytes),
            });
        }
        let manifest = Manifest {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            files: entries,
        };
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, to_json(&manifest)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(manifest)
    }
}
