//! Encoder-decoder Mahalanobis anomaly baseline.
//!
//! An MLP autoencoder is trained on non-relapse days; a Gaussian is fitted to
//! the bottleneck embeddings and each window is scored by the mean (or max)
//! day-level Mahalanobis distance.

use std::collections::BTreeSet;

use chrono::{Duration, NaiveDate};
use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::rpnet::batch_ranges;
use super::{
    check_digest, load_tensors, normalizer_from_params, params_text, standard_header, ModelFamily,
};
use crate::data::{Normalizer, ObservationWindow};
use crate::error::{Error, Result};
use crate::eval::ConfusionCounts;
use crate::nn::matrix::sigmoid;
use crate::nn::mlp::Mlp;
use crate::nn::persist::ParamFile;
use crate::nn::{adam_update, Activation, AdamConfig, AdamState, Matrix, Parameters};
use crate::seed::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Encoder widths after the input; the last entry is the embedding size.
    pub encoder_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aggregation: WindowAggregation,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            encoder_sizes: vec![64, 16],
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 64,
            aggregation: WindowAggregation::Mean,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowAggregation {
    Mean,
    Max,
}

impl std::str::FromStr for WindowAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(WindowAggregation::Mean),
            "max" => Ok(WindowAggregation::Max),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub network: Mlp,
    /// Number of leading layers forming the encoder.
    pub encoder_layers: usize,
    pub config: AutoencoderConfig,
}

impl Autoencoder {
    pub fn new(input_dim: usize, config: &AutoencoderConfig) -> Result<Self> {
        let enc = &config.encoder_sizes;
        let embedding = *enc
            .last()
            .ok_or_else(|| Error::InvalidArgument("encoder needs at least one layer".into()))?;
        if embedding >= input_dim {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {embedding} must be below input dim {input_dim}"
            )));
        }
        let mut sizes = vec![input_dim];
        sizes.extend(enc);
        sizes.extend(enc.iter().rev().skip(1));
        sizes.push(input_dim);
        let mut acts = Vec::new();
        for i in 0..enc.len() {
            acts.push(if i + 1 == enc.len() {
                Activation::Linear
            } else {
                Activation::Relu
            });
        }
        for _ in 1..enc.len() {
            acts.push(Activation::Relu);
        }
        acts.push(Activation::Linear);
        let init_seed = seed::derive(config.seed, &[purpose::INIT]);
        Ok(Autoencoder {
            network: Mlp::init(&sizes, &acts, init_seed)?,
            encoder_layers: enc.len(),
            config: config.clone(),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.network.layers[self.encoder_layers - 1].output_dim()
    }

    pub fn encode(&self, day: &[f64]) -> Result<Vec<f64>> {
        self.network.forward_prefix(day, self.encoder_layers)
    }

    pub fn reconstruct(&self, day: &[f64]) -> Result<Vec<f64>> {
        self.network.forward(day)
    }

    pub fn reconstruction_mse(&self, days: &[&[f64]]) -> Result<f64> {
        self.network.mse(days, days)
    }
}

pub fn train_autoencoder(days: &[&[f64]], config: &AutoencoderConfig) -> Result<Autoencoder> {
    if days.is_empty() {
        return Err(Error::InvalidArgument(
            "autoencoder needs at least one day".into(),
        ));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let dim = days[0].len();
    if let Some(d) = days.iter().find(|d| d.len() != dim) {
        return Err(Error::shape("autoencoder input", dim, d.len()));
    }
    let mut model = Autoencoder::new(dim, config)?;
    let mut state = AdamState::new(&model.network, AdamConfig::with_alpha(config.learning_rate))?;
    let mut order: Vec<usize> = (0..days.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = seed::derived_rng(config.seed, &[purpose::SHUFFLE, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for range in batch_ranges(order.len(), config.batch_size) {
            let batch: Vec<&[f64]> = order[range].iter().map(|&i| days[i]).collect();
            let (_, grads) = model.network.mse_backward(&batch, &batch)?;
            adam_update(&mut model.network, &grads, &mut state)?;
        }
    }
    Ok(model)
}

/// Inverse covariance verified symmetric positive definite.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceInverse {
    matrix: Matrix,
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

impl CovarianceInverse {
    pub fn new(matrix: Matrix) -> Result<Self> {
        let n = matrix.rows();
        if n == 0 || matrix.cols() != n {
            return Err(Error::shape(
                "covariance inverse",
                "square",
                format!("{n}x{}", matrix.cols()),
            ));
        }
        let scale = matrix
            .as_slice()
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()))
            .max(1e-300);
        for r in 0..n {
            for c in (r + 1)..n {
                if (matrix.get(r, c) - matrix.get(c, r)).abs() > 1e-9 * scale {
                    return Err(Error::InvalidArgument(
                        "covariance inverse is not symmetric".into(),
                    ));
                }
            }
        }
        if to_dmatrix(&matrix).cholesky().is_none() {
            return Err(Error::InvalidArgument(
                "covariance inverse is not positive definite".into(),
            ));
        }
        Ok(CovarianceInverse { matrix })
    }

    /// Inverts `cov + ridge * I`.
    pub fn from_covariance(cov: &Matrix, ridge: f64) -> Result<Self> {
        let n = cov.rows();
        let mut m = to_dmatrix(cov);
        for i in 0..n {
            m[(i, i)] += ridge;
        }
        let inv = m
            .cholesky()
            .ok_or_else(|| {
                Error::InvalidArgument("regularized covariance is not positive definite".into())
            })?
            .inverse();
        let mut out = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                out.set(r, c, 0.5 * (inv[(r, c)] + inv[(c, r)]));
            }
        }
        CovarianceInverse::new(out)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
}

pub fn mahalanobis_distance(
    x: &[f64],
    mean: &[f64],
    cov_inverse: &CovarianceInverse,
) -> Result<f64> {
    let n = cov_inverse.dim();
    if x.len() != n || mean.len() != n {
        return Err(Error::shape(
            "mahalanobis",
            n,
            format!("x={}, mean={}", x.len(), mean.len()),
        ));
    }
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut tmp = vec![0.0; n];
    cov_inverse.matrix.matvec_acc(&diff, &mut tmp);
    let q: f64 = diff.iter().zip(&tmp).map(|(a, b)| a * b).sum();
    Ok(q.max(0.0).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub f2: f64,
    /// True when every score was identical and nothing could be separated.
    pub degenerate: bool,
}

fn counts_at(scores: &[f64], labels: &[bool], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        c.record(s > threshold, y);
    }
    c
}

/// Picks the midpoint between consecutive unique scores with the highest
/// training F2; ties go to the smallest threshold.
pub fn sweep_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("threshold sweep", scores.len(), labels.len()));
    }
    let mut unique = scores.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    if unique.len() < 2 {
        let threshold = unique[0] + 1.0;
        warn!("all anomaly scores identical; predicting every window negative");
        return Ok(ThresholdChoice {
            threshold,
            f2: counts_at(scores, labels, threshold).f2(),
            degenerate: true,
        });
    }
    let mut best = ThresholdChoice {
        threshold: f64::NAN,
        f2: f64::NEG_INFINITY,
        degenerate: false,
    };
    for pair in unique.windows(2) {
        let t = 0.5 * (pair[0] + pair[1]);
        let f2 = counts_at(scores, labels, t).f2();
        if f2 > best.f2 {
            best.threshold = t;
            best.f2 = f2;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct AnomalyDetector {
    pub autoencoder: Autoencoder,
    pub mean: Vec<f64>,
    pub cov_inverse: CovarianceInverse,
    pub threshold: f64,
    /// Interquartile range of training window scores (1 if zero).
    pub scale: f64,
    pub aggregation: WindowAggregation,
    pub normalizer: Normalizer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyPrediction {
    pub score: f64,
    pub probability: f64,
    pub positive: bool,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn window_score(
    encoder: &Autoencoder,
    mean: &[f64],
    inv: &CovarianceInverse,
    aggregation: WindowAggregation,
    window: &ObservationWindow,
) -> Result<f64> {
    let mut acc = match aggregation {
        WindowAggregation::Mean => 0.0,
        WindowAggregation::Max => f64::NEG_INFINITY,
    };
    for day in window.day_rows() {
        let d = mahalanobis_distance(&encoder.encode(day)?, mean, inv)?;
        acc = match aggregation {
            WindowAggregation::Mean => acc + d,
            WindowAggregation::Max => acc.max(d),
        };
    }
    Ok(match aggregation {
        WindowAggregation::Mean => acc / window.days as f64,
        WindowAggregation::Max => acc,
    })
}

/// Distinct `(patient, date)` days of the non-relapse windows.
pub fn non_relapse_days<'a>(windows: &[&'a ObservationWindow]) -> Vec<&'a [f64]> {
    let mut seen: BTreeSet<(&str, NaiveDate)> = BTreeSet::new();
    let mut out = Vec::new();
    for w in windows.iter().filter(|w| !w.label) {
        for t in 0..w.days {
            let date = w.window_start + Duration::days(t as i64);
            if seen.insert((w.patient_id.as_str(), date)) {
                out.push(w.day(t));
            }
        }
    }
    out
}

pub fn fit_anomaly_detector(
    encoder: &Autoencoder,
    windows: &[&ObservationWindow],
    normalizer: &Normalizer,
) -> Result<AnomalyDetector> {
    let days = non_relapse_days(windows);
    if days.is_empty() {
        return Err(Error::InvalidArgument(
            "no non-relapse days to fit the detector".into(),
        ));
    }
    let k = encoder.embedding_dim();
    let embeddings: Vec<Vec<f64>> = days
        .iter()
        .map(|d| encoder.encode(d))
        .collect::<Result<_>>()?;
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0; k];
    for e in &embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / n;
        }
    }
    let mut cov = Matrix::zeros(k, k);
    for e in &embeddings {
        let d: Vec<f64> = e.iter().zip(&mean).map(|(a, b)| a - b).collect();
        cov.add_outer(1.0 / n, &d, &d);
    }
    let trace: f64 = (0..k).map(|i| cov.get(i, i)).sum();
    let ridge = (1e-3 * trace / k as f64).max(1e-9);
    let inv = CovarianceInverse::from_covariance(&cov, ridge)?;
    let aggregation = encoder.config.aggregation;
    let scores: Vec<f64> = windows
        .iter()
        .map(|w| window_score(encoder, &mean, &inv, aggregation, w))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = windows.iter().map(|w| w.label).collect();
    let choice = sweep_threshold(&scores, &labels)?;
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    Ok(AnomalyDetector {
        autoencoder: encoder.clone(),
        mean,
        cov_inverse: inv,
        threshold: choice.threshold.max(0.0),
        scale: if iqr > 0.0 { iqr } else { 1.0 },
        aggregation,
        normalizer: normalizer.clone(),
    })
}

/// Converts a window score into the calibrated output.
pub fn anomaly_output(detector: &AnomalyDetector, score: f64) -> AnomalyPrediction {
    AnomalyPrediction {
        score,
        probability: sigmoid((score - detector.threshold) / detector.scale),
        positive: score > detector.threshold,
    }
}

pub fn anomaly_predict_window(
    detector: &AnomalyDetector,
    window: &ObservationWindow,
) -> Result<AnomalyPrediction> {
    let score = window_score(
        &detector.autoencoder,
        &detector.mean,
        &detector.cov_inverse,
        detector.aggregation,
        window,
    )?;
    Ok(anomaly_output(detector, score))
}

impl AnomalyDetector {
    pub fn to_text(&self) -> String {
        let config = serde_json::to_string(&self.autoencoder.config).expect("config serializes");
        let mut header = standard_header(
            ModelFamily::Autoenc,
            config,
            self.autoencoder.config.seed,
            &self.normalizer,
        );
        header.push((
            "input_dim".into(),
            self.autoencoder.network.input_dim().to_string(),
        ));
        header.push(("threshold".into(), format!("{:.16e}", self.threshold)));
        header.push(("scale".into(), format!("{:.16e}", self.scale)));
        let mean = Matrix::from_vec(1, self.mean.len(), self.mean.clone()).expect("finite mean");
        let mut tensors = self.autoencoder.network.tensors();
        tensors.push(("anomaly.mean".into(), &mean));
        tensors.push(("anomaly.cov_inverse".into(), self.cov_inverse.matrix()));
        params_text(&header, &tensors, &self.normalizer).expect("finite normalizer")
    }

    pub(crate) fn from_params(file: &ParamFile) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("bad {what} header"));
        let config: AutoencoderConfig = serde_json::from_str(file.header_value("config")?)
            .map_err(|e| Error::Format(format!("bad config header: {e}")))?;
        let input_dim: usize = file
            .header_value("input_dim")?
            .parse()
            .map_err(|_| bad("input_dim"))?;
        let mut autoencoder = Autoencoder::new(input_dim, &config)?;
        load_tensors(file, autoencoder.network.tensors_mut())?;
        let normalizer = normalizer_from_params(file)?;
        check_digest(file, &normalizer)?;
        Ok(AnomalyDetector {
            mean: file.tensor("anomaly.mean")?.as_slice().to_vec(),
            cov_inverse: CovarianceInverse::new(file.tensor("anomaly.cov_inverse")?.clone())?,
            threshold: file
                .header_value("threshold")?
                .parse()
                .map_err(|_| bad("threshold"))?,
            scale: file
                .header_value("scale")?
                .parse()
                .map_err(|_| bad("scale"))?,
            aggregation: config.aggregation,
            autoencoder,
            normalizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv(m: &[f64], n: usize) -> CovarianceInverse {
        CovarianceInverse::new(Matrix::from_vec(n, n, m.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn mahalanobis_examples() {
        let id = inv(&[1.0, 0.0, 0.0, 1.0], 2);
        assert!((mahalanobis_distance(&[3.0, 4.0], &[0.0, 0.0], &id).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(
            mahalanobis_distance(&[1.5, -2.0], &[1.5, -2.0], &id).unwrap(),
            0.0
        );
        let diag = inv(&[0.25, 0.0, 0.0, 1.0], 2);
        assert!(
            (mahalanobis_distance(&[2.0, 0.0], &[0.0, 0.0], &diag).unwrap() - 1.0).abs() < 1e-12
        );
        assert!(mahalanobis_distance(&[1.0], &[0.0, 0.0], &id).is_err());
    }

    #[test]
    fn non_psd_rejected() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(CovarianceInverse::new(m).is_err());
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(CovarianceInverse::new(m).is_err());
    }

    #[test]
    fn ridge_rescues_singular_covariance() {
        let cov = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(CovarianceInverse::from_covariance(&cov, 0.0).is_err());
        assert!(CovarianceInverse::from_covariance(&cov, 1e-3).is_ok());
    }

    #[test]
    fn separated_scores_threshold() {
        let scores = [1.0, 2.0, 8.0, 9.0];
        let labels = [false, false, true, true];
        let c = sweep_threshold(&scores, &labels).unwrap();
        assert!(c.threshold > 2.0 && c.threshold < 8.0);
        assert_eq!(c.f2, 1.0);
    }

    #[test]
    fn identical_scores_predict_negative() {
        let c = sweep_threshold(&[3.0, 3.0], &[true, false]).unwrap();
        assert!(c.degenerate);
        assert!(c.threshold > 3.0);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert_eq!(quantile(&s, 0.75), 4.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn autoencoder_shapes() {
        let ae = Autoencoder::new(144, &AutoencoderConfig::default()).unwrap();
        assert_eq!(ae.embedding_dim(), 16);
        assert_eq!(ae.encode(&[0.5; 144]).unwrap().len(), 16);
        assert_eq!(ae.reconstruct(&[0.5; 144]).unwrap().len(), 144);
        assert!(Autoencoder::new(16, &AutoencoderConfig::default()).is_err());
    }
}
