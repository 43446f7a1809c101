//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;

use relapse_core::data::{build_day_vectors, ingest_cohort, ingest_cohort_from_readers, CsvSource};
use relapse_core::eval::diagnostics::window_id;
use relapse_core::eval::experiment::{
    build_subset, needs_scaler, prepare_fold, run_fold, FoldOutcome,
};
use relapse_core::eval::{
    build_relapse_test_set, class_distance_distributions, export_embeddings, lopo_folds,
    run_experiment, separability_index, sfs_distance_analysis, silhouette_coefficient,
    DistanceAnalysis, DistanceSummary, ExperimentConfig, MetricsReport, PersonalizationMode,
};
use relapse_core::models::{fuse_probabilities, FusionScheme, ModelFamily};
use relapse_core::personalization::{MetricScaler, Stratum};
use relapse_core::seed::{self, purpose};
use relapse_core::synth::generate_cohort;
use relapse_core::{Cohort, ObservationWindow, PersonalizationMetric, TrainedModel};

use crate::config::{loss_flag, synthetic_spec, DataSource, RunConfig, Settings};
use crate::output::{
    folds_from_rows, parse_predictions, prediction_rows, predictions_csv, read_predictions,
    seeds_of, sha256_hex, to_json, Artifacts, PredictionRow,
};
use crate::{
    DataArgs, DataError, DiagnoseArgs, EvaluateArgs, ExperimentArgs, FuseArgs, ReportArgs,
    SynthArgs, UsageError,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn base_settings(
    config: &Option<PathBuf>,
    assignments: &[String],
) -> Result<(Settings, Vec<String>)> {
    let settings = match config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    Ok((settings, assignments.to_vec()))
}

fn set_data_args(s: &mut Settings, d: &DataArgs) -> Result<()> {
    for (key, v) in [
        ("dir", &d.data_dir),
        ("patients", &d.patients),
        ("sensing", &d.sensing),
        ("relapses", &d.relapses),
    ] {
        if let Some(p) = v {
            s.set("data", key, p.display().to_string())?;
        }
    }
    Ok(())
}

/// File values, then flags, then `--set` assignments.
pub fn experiment_settings(a: &ExperimentArgs) -> Result<Settings> {
    let (mut s, assignments) = base_settings(&a.config.config, &a.config.set)?;
    set_data_args(&mut s, &a.data)?;
    if let Some(m) = &a.model {
        s.set("model", "family", m)?;
    }
    let family: ModelFamily = s
        .get("model", "family")
        .unwrap_or("rpnet")
        .parse()
        .map_err(|e: relapse_core::Error| usage(e.to_string()))?;
    if let Some(l) = &a.loss {
        loss_flag(l)?;
        if family != ModelFamily::Rpnet {
            return Err(usage(format!(
                "--loss applies only to --model rpnet, not {family}"
            )));
        }
        s.set("model", "loss", l)?;
    }
    if let Some(e) = a.epochs {
        let key = match family {
            ModelFamily::Autoenc => "epochs",
            ModelFamily::Rpnet => "max_epochs",
            ModelFamily::Rf => return Err(usage("--epochs does not apply to --model rf")),
        };
        s.set("model", key, e.to_string())?;
    }
    if let Some(v) = a.learning_rate {
        s.set("model", "learning_rate", v.to_string())?;
    }
    if let Some(v) = a.hidden_dim {
        s.set("model", "hidden_dim", v.to_string())?;
    }
    for (key, v) in [
        ("mode", &a.personalization),
        ("metric", &a.metric),
        ("stratum", &a.stratum),
    ] {
        if let Some(v) = v {
            s.set("personalization", key, v)?;
        }
    }
    for (key, v) in [
        ("modalities", &a.modalities),
        ("seeds", &a.seeds),
        ("test_patients", &a.test_patients),
    ] {
        if let Some(v) = v {
            s.set("evaluation", key, v)?;
        }
    }
    if let Some(o) = &a.out {
        s.set("output", "dir", o.display().to_string())?;
    }
    for assignment in &assignments {
        s.set_assignment(assignment)?;
    }
    Ok(s)
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.output
        .as_deref()
        .ok_or_else(|| usage("an output directory is required (--out or [output] dir)"))
}

fn digest_of(value: &impl Serialize) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

pub struct LoadedCohort {
    pub cohort: Cohort,
    /// Digest over the digests of the three input files.
    pub data_digest: String,
}

fn combined_digest(parts: &[&[u8]]) -> String {
    let joined: Vec<String> = parts.iter().map(|p| sha256_hex(p)).collect();
    sha256_hex(joined.join("\n").as_bytes())
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path)
        .map_err(|e| DataError(format!("cannot read {}: {e}", path.display())).into())
}

pub fn load_cohort(source: &DataSource) -> Result<LoadedCohort> {
    let (p, s, r, names) = match source {
        DataSource::Synthetic(spec) => {
            let files = generate_cohort(spec)?;
            (
                files.patients_csv.into_bytes(),
                files.sensing_csv.into_bytes(),
                files.relapses_csv.into_bytes(),
                [
                    "patients.csv".to_string(),
                    "sensing.csv".into(),
                    "relapses.csv".into(),
                ],
            )
        }
        DataSource::Csv {
            patients,
            sensing,
            relapses,
        } => (
            read_input(patients)?,
            read_input(sensing)?,
            read_input(relapses)?,
            [patients, sensing, relapses].map(|x| x.display().to_string()),
        ),
    };
    let [pn, sn, rn] = names;
    let cohort = ingest_cohort_from_readers(
        CsvSource::new(pn, p.as_slice()),
        CsvSource::new(sn, s.as_slice()),
        CsvSource::new(rn, r.as_slice()),
    )?;
    Ok(LoadedCohort {
        cohort,
        data_digest: combined_digest(&[&p, &s, &r]),
    })
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let (mut s, assignments) = base_settings(&a.config.config, &a.config.set)?;
    if let Some(n) = a.n_patients {
        s.set("synthetic", "n_patients", n.to_string())?;
    }
    if let Some(d) = a.days {
        s.set("synthetic", "days_per_patient", d.to_string())?;
    }
    if let Some(seed) = a.seed {
        s.set("synthetic", "seed", seed.to_string())?;
    }
    for assignment in &assignments {
        s.set_assignment(assignment)?;
    }
    let spec = synthetic_spec(&s)?;
    let out = match (&a.out, s.get("output", "dir")) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => {
            return Err(usage(
                "an output directory is required (--out or [output] dir)",
            ))
        }
    };
    let files = generate_cohort(&spec)?;
    let mut art = Artifacts::new(&out);
    art.add("patients.csv", files.patients_csv.into_bytes());
    art.add("sensing.csv", files.sensing_csv.into_bytes());
    art.add("relapses.csv", files.relapses_csv.into_bytes());
    art.write("synth", digest_of(&spec)?)?;
    println!(
        "wrote {} patients x {} days to {}",
        spec.n_patients,
        spec.days_per_patient,
        out.display()
    );
    Ok(())
}

pub fn validate(a: &DataArgs) -> Result<()> {
    let path = |explicit: &Option<PathBuf>, name: &str| -> Result<PathBuf> {
        match (explicit, &a.data_dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(name)),
            (None, None) => Err(usage(format!(
                "missing --{} (or --data-dir)",
                name.trim_end_matches(".csv")
            ))),
        }
    };
    let (p, s, r) = (
        path(&a.patients, "patients.csv")?,
        path(&a.sensing, "sensing.csv")?,
        path(&a.relapses, "relapses.csv")?,
    );
    let summary = ingest_cohort(&p, &s, &r)?.summary();
    println!("patients: {}", summary.patients);
    println!("relapse patients: {}", summary.relapse_patients);
    println!("relapse instances: {}", summary.relapse_instances);
    println!("sensing hours: {}", summary.sensing_hours);
    println!("observed values: {}", summary.observed_values);
    println!("coverage: {:.4}", summary.coverage);
    Ok(())
}

#[derive(Serialize)]
struct FoldProvenance<'a> {
    seed: u64,
    fold: usize,
    test_patient_id: &'a str,
    training_patients: &'a [String],
    normalizer_patients: &'a [String],
    sampled_donors: &'a [String],
    n_training_windows: usize,
    n_predictions: usize,
}

#[derive(Serialize)]
struct EvaluationMetrics<'a> {
    code_version: &'static str,
    config: &'a RunConfig,
    config_digest: &'a str,
    data_digest: &'a str,
    input_dim: usize,
    full_test_set: &'a MetricsReport,
    relapse_test_set: Option<MetricsReport>,
    provenance: Vec<FoldProvenance<'a>>,
}

fn print_report(label: &str, r: &MetricsReport) {
    println!(
        "{label}: F2 {:.4}  precision {:.4}  recall {:.4}  seeds {}  skipped folds {}",
        r.f2,
        r.precision,
        r.recall,
        r.n_seeds,
        r.skipped_folds.len()
    );
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut s = experiment_settings(&a.experiment)?;
    if a.relapse_test_set {
        s.set("evaluation", "relapse_test_set", "true")?;
    }
    let cfg = s.resolve()?;
    let out = output_dir(&cfg)?.to_path_buf();
    let loaded = load_cohort(&cfg.data)?;
    let run = run_experiment(&loaded.cohort, &cfg.experiment)?;
    let rts = match &cfg.relapse_test_set {
        Some(t) => {
            let folds = build_relapse_test_set(&run.folds, t.fraction, t.seed)?;
            Some(MetricsReport::from_folds(
                &folds,
                &cfg.experiment.seeds,
                Vec::new(),
            ))
        }
        None => None,
    };
    let config_digest = digest_of(&cfg)?;
    let provenance = run
        .folds
        .iter()
        .map(|f| FoldProvenance {
            seed: f.seed,
            fold: f.fold,
            test_patient_id: &f.test_patient_id,
            training_patients: &f.training_patients,
            normalizer_patients: &f.normalizer_patients,
            sampled_donors: &f.sampled_donors,
            n_training_windows: f.n_training_windows,
            n_predictions: f.predictions.len(),
        })
        .collect();
    let metrics = EvaluationMetrics {
        code_version: env!("CARGO_PKG_VERSION"),
        config: &cfg,
        config_digest: &config_digest,
        data_digest: &loaded.data_digest,
        input_dim: cfg.experiment.modalities.dim(),
        full_test_set: &run.report,
        relapse_test_set: rts.clone(),
        provenance,
    };
    let mut art = Artifacts::new(&out);
    art.add(
        "predictions.csv",
        predictions_csv(&prediction_rows(&run.folds))?,
    );
    art.add("metrics.json", to_json(&metrics)?);
    art.write("evaluate", config_digest)?;
    print_report("full test set", &run.report);
    if let Some(r) = &rts {
        print_report("relapse test set", r);
    }
    Ok(())
}

/// Row-wise fusion of two files with identical (patient, week, seed) keys.
pub fn fuse_rows(
    a: &[PredictionRow],
    b: &[PredictionRow],
    scheme: FusionScheme,
    threshold: f64,
) -> Result<Vec<PredictionRow>> {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    let by_key = |x: &PredictionRow, y: &PredictionRow| x.key().cmp(&y.key());
    a.sort_by(by_key);
    b.sort_by(by_key);
    for (i, (ra, rb)) in a.iter().zip(&b).enumerate() {
        if ra.key() != rb.key() {
            bail!(DataError(format!(
                "prediction keys diverge at sorted row {}: {:?} vs {:?}",
                i + 1,
                ra.key(),
                rb.key()
            )));
        }
        if ra.label != rb.label {
            bail!(DataError(format!("labels disagree for {:?}", ra.key())));
        }
    }
    if a.len() != b.len() {
        let (longer, n) = if a.len() > b.len() {
            (&a, b.len())
        } else {
            (&b, a.len())
        };
        let which = if a.len() > b.len() { "first" } else { "second" };
        bail!(DataError(format!(
            "prediction keys diverge at sorted row {}: {:?} only in the {which} file",
            n + 1,
            longer[n].key()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    a.iter()
        .zip(&b)
        .map(|(ra, rb)| {
            if !seen.insert(ra.key()) {
                bail!(DataError(format!(
                    "duplicate prediction key {:?}",
                    ra.key()
                )));
            }
            let p = fuse_probabilities(ra.probability, rb.probability, scheme)?;
            Ok(PredictionRow {
                probability: p,
                prediction: (p > threshold) as u8,
                ..ra.clone()
            })
        })
        .collect()
}

#[derive(Serialize)]
struct FusionMetrics<'a> {
    code_version: &'static str,
    scheme: FusionScheme,
    threshold: f64,
    inputs: [String; 2],
    full_test_set: &'a MetricsReport,
}

pub fn fuse(a: &FuseArgs) -> Result<()> {
    let scheme: FusionScheme = a
        .scheme
        .parse()
        .map_err(|e: relapse_core::Error| usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage("--threshold must lie in [0, 1]"));
    }
    let bytes_a = read_input(&a.predictions_a)?;
    let bytes_b = read_input(&a.predictions_b)?;
    let rows_a = parse_predictions(&bytes_a, &a.predictions_a.display().to_string())?;
    let rows_b = parse_predictions(&bytes_b, &a.predictions_b.display().to_string())?;
    let fused = fuse_rows(&rows_a, &rows_b, scheme, a.threshold)?;
    let folds = folds_from_rows(&fused);
    let report = MetricsReport::from_folds(&folds, &seeds_of(&fused), Vec::new());
    let metrics = FusionMetrics {
        code_version: env!("CARGO_PKG_VERSION"),
        scheme,
        threshold: a.threshold,
        inputs: [sha256_hex(&bytes_a), sha256_hex(&bytes_b)],
        full_test_set: &report,
    };
    let metrics_bytes = to_json(&metrics)?;
    let mut art = Artifacts::new(&a.out);
    art.add(
        "predictions.csv",
        predictions_csv(&prediction_rows(&folds))?,
    );
    art.add("metrics.json", metrics_bytes.clone());
    art.write("fuse", sha256_hex(&metrics_bytes))?;
    print_report(&format!("{} fusion", a.scheme), &report);
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let rows = read_predictions(&a.predictions)?;
    if rows.is_empty() {
        bail!(DataError(format!(
            "{} holds no predictions",
            a.predictions.display()
        )));
    }
    let folds = folds_from_rows(&rows);
    let seeds = seeds_of(&rows);
    let full = MetricsReport::from_folds(&folds, &seeds, Vec::new());
    print_report("full test set", &full);
    if let Some(fraction) = a.relapse_test_fraction {
        let rts = build_relapse_test_set(&folds, fraction, a.relapse_test_seed)
            .map_err(|e| usage(e.to_string()))?;
        print_report(
            "relapse test set",
            &MetricsReport::from_folds(&rts, &seeds, Vec::new()),
        );
    }
    for s in &full.per_seed {
        println!(
            "seed {}: F2 {:.4}  tp {} fp {} fn {} tn {}",
            s.seed, s.f2, s.counts.tp, s.counts.fp, s.counts.fn_, s.counts.tn
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ClassDistanceSummary {
    intra: DistanceSummary,
    inter: DistanceSummary,
}

#[derive(Serialize)]
struct EmbeddingDiagnostics {
    windows: usize,
    dim: usize,
    silhouette: f64,
    separability_index: f64,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    code_version: &'static str,
    config: &'a RunConfig,
    config_digest: &'a str,
    data_digest: &'a str,
    test_patient: &'a str,
    seed: u64,
    personalized_mode: &'a PersonalizationMode,
    class_distances: std::collections::BTreeMap<&'static str, ClassDistanceSummary>,
    embeddings: EmbeddingDiagnostics,
    distance_analysis: DistanceAnalysis,
}

fn embeddings_csv(rows: &[relapse_core::eval::EmbeddingRow]) -> Result<Vec<u8>> {
    let dim = rows.first().map_or(0, |r| r.embedding.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["window_id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.window_id.clone(), (r.label as u8).to_string()];
        rec.extend(r.embedding.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}

/// Distances of the random and personalized subsets for one relapse fold,
/// fc2 embeddings of the personalized training windows, and the SFS
/// donor-distance analysis.
pub fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let cfg = experiment_settings(&a.experiment)?.resolve()?;
    if cfg.experiment.model.family() != ModelFamily::Rpnet {
        return Err(usage("diagnose needs --model rpnet"));
    }
    let out = output_dir(&cfg)?.to_path_buf();
    let loaded = load_cohort(&cfg.data)?;
    let cohort = &loaded.cohort;
    let relapse_ids = cohort.relapse_patient_ids();
    let test_id = match &cfg.experiment.test_patients {
        Some(ids) => ids
            .first()
            .cloned()
            .ok_or_else(|| usage("empty test patient list"))?,
        None => relapse_ids
            .first()
            .cloned()
            .ok_or_else(|| DataError("cohort has no relapse patient".into()))?,
    };
    let seed_value = cfg.experiment.seeds[0];
    let fold = lopo_folds(cohort)?
        .into_iter()
        .find(|f| f.test_patient_id == test_id)
        .ok_or_else(|| usage(format!("unknown test patient '{test_id}'")))?;
    let personalized = match &cfg.experiment.personalization {
        m @ (PersonalizationMode::Metric { .. } | PersonalizationMode::Stratified { .. }) => {
            m.clone()
        }
        _ => PersonalizationMode::Metric {
            metric: PersonalizationMetric::Sfs,
        },
    };
    let scaler = if needs_scaler(&personalized) {
        Some(MetricScaler::fit(&cohort.patients)?)
    } else {
        None
    };
    let days = build_day_vectors(cohort);
    let data = prepare_fold(cohort, &days, &fold, &cfg.experiment)?;
    let subset_seed = seed::derive(seed_value, &[purpose::SUBSET, fold.index as u64]);

    let mut distances = csv::Writer::from_writer(Vec::new());
    distances.write_record(["subsampling", "category", "distance"])?;
    let mut class_distances = std::collections::BTreeMap::new();
    for (name, mode) in [
        ("random", &PersonalizationMode::Random),
        ("personalized", &personalized),
    ] {
        let subset = build_subset(cohort, &data, mode, scaler.as_ref(), subset_seed)?;
        let d = class_distance_distributions(&subset.windows(&data.training))?;
        for (category, values) in [
            ("nonrelapse_nonrelapse", &d.intra),
            ("nonrelapse_relapse", &d.inter),
        ] {
            for v in values {
                distances.write_record([name, category, &v.to_string()])?;
            }
        }
        class_distances.insert(
            name,
            ClassDistanceSummary {
                intra: DistanceSummary::of(&d.intra),
                inter: DistanceSummary::of(&d.inter),
            },
        );
    }

    let personal_cfg = ExperimentConfig {
        personalization: personalized.clone(),
        ..cfg.experiment.clone()
    };
    let model = match run_fold(cohort, &data, &personal_cfg, scaler.as_ref(), seed_value)? {
        FoldOutcome::Done(_, TrainedModel::Rpnet(m)) => m,
        FoldOutcome::Done(..) => unreachable!("family checked above"),
        FoldOutcome::Skipped(s) => bail!("fold {test_id} cannot be trained: {}", s.reason),
    };
    let subset = build_subset(cohort, &data, &personalized, scaler.as_ref(), subset_seed)?;
    let normalized: Vec<ObservationWindow> = subset
        .windows(&data.training)
        .into_iter()
        .map(|w| {
            let mut w = w.clone();
            model.normalizer.apply_in_place(&mut w.input);
            w
        })
        .collect();
    let refs: Vec<&ObservationWindow> = normalized.iter().collect();
    let rows = export_embeddings(&model, &refs)?;
    debug_assert!(rows
        .iter()
        .zip(&refs)
        .all(|(r, w)| r.window_id == window_id(w)));
    let points: Vec<Vec<f64>> = rows.iter().map(|r| r.embedding.clone()).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.label as usize).collect();
    let embeddings = EmbeddingDiagnostics {
        windows: rows.len(),
        dim: points.first().map_or(0, Vec::len),
        silhouette: silhouette_coefficient(&points, &labels)?,
        separability_index: separability_index(&points, &labels)?,
    };

    let distance_analysis = sfs_distance_analysis(
        cohort,
        &cfg.experiment,
        &Stratum::ALL,
        a.permutations,
        seed_value,
    )?;
    let config_digest = digest_of(&cfg)?;
    let diagnostics = Diagnostics {
        code_version: env!("CARGO_PKG_VERSION"),
        config: &cfg,
        config_digest: &config_digest,
        data_digest: &loaded.data_digest,
        test_patient: &test_id,
        seed: seed_value,
        personalized_mode: &personalized,
        class_distances,
        embeddings,
        distance_analysis,
    };
    let mut art = Artifacts::new(&out);
    art.add("distances.csv", distances.into_inner()?);
    art.add("embeddings.csv", embeddings_csv(&rows)?);
    art.add("diagnostics.json", to_json(&diagnostics)?);
    art.write("diagnose", config_digest.clone())?;
    println!(
        "silhouette {:.4}  separability {:.4}  donor-distance r {:.4} (p {:.4})",
        diagnostics.embeddings.silhouette,
        diagnostics.embeddings.separability_index,
        diagnostics.distance_analysis.r,
        diagnostics.distance_analysis.p_value
    );
    Ok(())
}
