//! The three model families and late fusion.
//!
//! Every family consumes windows that have already been scaled with the
//! normalizer stored alongside the trained model, and emits a value in
//! `[0, 1]` so the evaluation harness can treat them uniformly.

pub mod anomaly;
pub mod forest;
pub mod rpnet;

use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, ObservationWindow};
use crate::error::{Error, Result};
use crate::nn::persist::{read_params, write_params, ParamFile};
use crate::nn::Matrix;

pub use anomaly::{
    anomaly_predict_window, fit_anomaly_detector, mahalanobis_distance, sweep_threshold,
    train_autoencoder, AnomalyDetector, AnomalyPrediction, Autoencoder, AutoencoderConfig,
    CovarianceInverse, ThresholdChoice, WindowAggregation,
};
pub use forest::{rf_predict, train_rf, DecisionTree, ForestConfig, RandomForest};
pub use rpnet::{predict_window, train_relapseprednet, RelapsePredNet, RelapsePredNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Rpnet,
    Autoenc,
    Rf,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Rpnet => "rpnet",
            ModelFamily::Autoenc => "autoenc",
            ModelFamily::Rf => "rf",
        }
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rpnet" => Ok(ModelFamily::Rpnet),
            "autoenc" => Ok(ModelFamily::Autoenc),
            "rf" => Ok(ModelFamily::Rf),
            other => Err(Error::InvalidArgument(format!(
                "unknown model family '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionScheme {
    Mean,
    Min,
    Max,
}

impl std::str::FromStr for FusionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FusionScheme::Mean),
            "min" => Ok(FusionScheme::Min),
            "max" => Ok(FusionScheme::Max),
            other => Err(Error::InvalidArgument(format!(
                "fusion scheme must be mean, min or max (got '{other}')"
            ))),
        }
    }
}

impl std::fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionScheme::Mean => "mean",
            FusionScheme::Min => "min",
            FusionScheme::Max => "max",
        })
    }
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "probability {p} outside [0, 1]"
        )))
    }
}

pub fn fuse_probabilities(p1: f64, p2: f64, scheme: FusionScheme) -> Result<f64> {
    check_probability(p1)?;
    check_probability(p2)?;
    Ok(match scheme {
        FusionScheme::Mean => 0.5 * (p1 + p2),
        FusionScheme::Min => p1.min(p2),
        FusionScheme::Max => p1.max(p2),
    })
}

/// A fitted model of any family, ready for prediction.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Rpnet(RelapsePredNet),
    Autoenc(AnomalyDetector),
    Rf(RandomForest),
}

impl TrainedModel {
    pub fn family(&self) -> ModelFamily {
        match self {
            TrainedModel::Rpnet(_) => ModelFamily::Rpnet,
            TrainedModel::Autoenc(_) => ModelFamily::Autoenc,
            TrainedModel::Rf(_) => ModelFamily::Rf,
        }
    }

    pub fn normalizer(&self) -> &Normalizer {
        match self {
            TrainedModel::Rpnet(m) => &m.normalizer,
            TrainedModel::Autoenc(m) => &m.normalizer,
            TrainedModel::Rf(m) => &m.normalizer,
        }
    }

    /// Probability and binary decision for a normalized window.
    pub fn predict(&self, window: &ObservationWindow) -> Result<(f64, bool)> {
        match self {
            TrainedModel::Rpnet(m) => {
                let p = predict_window(m, window)?;
                Ok((p, p > m.config.threshold))
            }
            TrainedModel::Autoenc(d) => {
                let a = anomaly_predict_window(d, window)?;
                Ok((a.probability, a.positive))
            }
            TrainedModel::Rf(f) => {
                let p = rf_predict(f, window)?;
                Ok((p, p > 0.5))
            }
        }
    }

    /// Normalizes a raw window with the stored normalizer, then predicts.
    pub fn predict_raw(&self, window: &ObservationWindow) -> Result<(f64, bool)> {
        let mut w = window.clone();
        let norm = self.normalizer();
        if norm.dim() != w.dim {
            return Err(Error::shape("normalizer width", norm.dim(), w.dim));
        }
        norm.apply_in_place(&mut w.input);
        self.predict(&w)
    }

    pub fn to_text(&self) -> String {
        match self {
            TrainedModel::Rpnet(m) => m.to_text(),
            TrainedModel::Autoenc(m) => m.to_text(),
            TrainedModel::Rf(m) => m.to_text(),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        if text.starts_with(forest::FOREST_MAGIC) {
            return Ok(TrainedModel::Rf(RandomForest::from_text(text)?));
        }
        let file = read_params(text)?;
        match file.header_value("family")? {
            "rpnet" => Ok(TrainedModel::Rpnet(RelapsePredNet::from_params(&file)?)),
            "autoenc" => Ok(TrainedModel::Autoenc(AnomalyDetector::from_params(&file)?)),
            other => Err(Error::Format(format!("unknown model family '{other}'"))),
        }
    }
}

pub(crate) fn normalizer_tensors(n: &Normalizer) -> Result<(Matrix, Matrix)> {
    Ok((
        Matrix::from_vec(1, n.dim(), n.min.clone())?,
        Matrix::from_vec(1, n.dim(), n.max.clone())?,
    ))
}

pub(crate) fn normalizer_from_params(file: &ParamFile) -> Result<Normalizer> {
    Ok(Normalizer {
        min: file.tensor("normalizer.min")?.as_slice().to_vec(),
        max: file.tensor("normalizer.max")?.as_slice().to_vec(),
        fitted_on: file
            .header_value("normalizer_fitted_on")
            .unwrap_or("")
            .to_string(),
    })
}

pub(crate) fn standard_header(
    family: ModelFamily,
    config_json: String,
    seed: u64,
    normalizer: &Normalizer,
) -> Vec<(String, String)> {
    vec![
        ("family".into(), family.name().into()),
        ("config".into(), config_json),
        ("seed".into(), seed.to_string()),
        ("normalizer_digest".into(), normalizer.digest()),
        ("normalizer_fitted_on".into(), normalizer.fitted_on.clone()),
    ]
}

/// Serializes trainable tensors plus extras under one header.
pub(crate) fn params_text(
    header: &[(String, String)],
    params: &[(String, &Matrix)],
    normalizer: &Normalizer,
) -> Result<String> {
    let (lo, hi) = normalizer_tensors(normalizer)?;
    let mut all: Vec<(String, &Matrix)> = params.to_vec();
    all.push(("normalizer.min".into(), &lo));
    all.push(("normalizer.max".into(), &hi));
    Ok(write_params(header, &all))
}

/// Copies every tensor of `target` from the file, checking shapes.
pub(crate) fn load_tensors<'a>(
    file: &ParamFile,
    target: impl IntoIterator<Item = (String, &'a mut Matrix)>,
) -> Result<()> {
    for (name, m) in target {
        let src = file.tensor(&name)?;
        if src.rows() != m.rows() || src.cols() != m.cols() {
            return Err(Error::Format(format!(
                "tensor '{name}' is {}x{}, expected {}x{}",
                src.rows(),
                src.cols(),
                m.rows(),
                m.cols()
            )));
        }
        *m = src.clone();
    }
    Ok(())
}

pub(crate) fn check_digest(file: &ParamFile, normalizer: &Normalizer) -> Result<()> {
    let stored = file.header_value("normalizer_digest")?;
    if stored != normalizer.digest() {
        return Err(Error::Format("normalizer digest mismatch".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_examples() {
        assert_eq!(
            fuse_probabilities(0.2, 0.6, FusionScheme::Min).unwrap(),
            0.2
        );
        assert!((fuse_probabilities(0.2, 0.6, FusionScheme::Mean).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(
            fuse_probabilities(0.2, 0.6, FusionScheme::Max).unwrap(),
            0.6
        );
        assert_eq!(
            fuse_probabilities(0.3, 0.3, FusionScheme::Max).unwrap(),
            0.3
        );
        assert!(fuse_probabilities(1.2, 0.3, FusionScheme::Mean).is_err());
        assert!(fuse_probabilities(0.2, -0.1, FusionScheme::Min).is_err());
        assert!("median".parse::<FusionScheme>().is_err());
        for s in ["mean", "min", "max"] {
            assert_eq!(s.parse::<FusionScheme>().unwrap().to_string(), s);
        }
    }
}
