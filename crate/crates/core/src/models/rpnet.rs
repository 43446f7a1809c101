//! Supervised bi-LSTM relapse predictor.

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    check_digest, load_tensors, normalizer_from_params, params_text, standard_header, ModelFamily,
};
use crate::data::{Normalizer, ObservationWindow};
use crate::error::{Error, Result};
use crate::nn::persist::ParamFile;
use crate::nn::{
    adam_update, network_backward, AdamConfig, AdamState, LossKind, Matrix, Mode, NetworkParams,
    NetworkShape, Parameters,
};
use crate::seed::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelapsePredNetConfig {
    pub hidden_dim: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub dropout: f64,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_improvement: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RelapsePredNetConfig {
    fn default() -> Self {
        RelapsePredNetConfig {
            hidden_dim: 128,
            fc1: 128,
            fc2: 64,
            dropout: 0.2,
            loss: LossKind::Bce,
            learning_rate: 1e-5,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            min_improvement: 1e-5,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl RelapsePredNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 2".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(
                "threshold must lie in [0, 1]".into(),
            ));
        }
        self.shape(1).validate()
    }

    pub fn shape(&self, input_dim: usize) -> NetworkShape {
        NetworkShape {
            input_dim,
            hidden_dim: self.hidden_dim,
            fc1: self.fc1,
            fc2: self.fc2,
            dropout_rate: self.dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RelapsePredNet {
    pub params: NetworkParams,
    pub normalizer: Normalizer,
    pub config: RelapsePredNetConfig,
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
}

/// Splits `n` shuffled indices into batches; a trailing batch of one sample
/// is merged into its predecessor so batch-norm always sees two rows.
pub(crate) fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch_size)
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

pub fn train_relapseprednet(
    windows: &[&ObservationWindow],
    normalizer: &Normalizer,
    config: &RelapsePredNetConfig,
) -> Result<RelapsePredNet> {
    config.validate()?;
    if windows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 windows, got {}",
            windows.len()
        )));
    }
    let dim = windows[0].dim;
    if let Some(w) = windows
        .iter()
        .find(|w| w.dim != dim || w.days != windows[0].days)
    {
        return Err(Error::shape("training window", dim, w.dim));
    }
    let init_seed = seed::derive(config.seed, &[purpose::INIT]);
    let mut params = NetworkParams::init(&config.shape(dim), init_seed)?;
    let mut state = AdamState::new(&params, AdamConfig::with_alpha(config.learning_rate))?;
    let inputs: Vec<&[f64]> = windows.iter().map(|w| w.input.as_slice()).collect();
    let labels: Vec<f64> = windows.iter().map(|w| w.label_f64()).collect();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut history = Vec::new();
    for epoch in 0..config.max_epochs {
        let mut rng = seed::derived_rng(config.seed, &[purpose::SHUFFLE, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, range) in batch_ranges(order.len(), config.batch_size)
            .into_iter()
            .enumerate()
        {
            let idx = &order[range];
            let batch: Vec<&[f64]> = idx.iter().map(|&i| inputs[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
            let drop_seed = seed::derive(config.seed, &[purpose::DROPOUT, epoch as u64, b as u64]);
            let out = network_backward(&params, &batch, &y, config.loss, Mode::Train, drop_seed)?;
            adam_update(&mut params, &out.grads, &mut state)?;
            params.apply_batch_stats(&out);
            total += out.loss * idx.len() as f64;
        }
        let epoch_loss = total / windows.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite {
                layer: "training loss",
            });
        }
        history.push(epoch_loss);
        if best - epoch_loss < config.min_improvement {
            stale += 1;
            if stale >= config.patience {
                debug!(
                    "early stop after {} epochs (loss {epoch_loss:.6})",
                    epoch + 1
                );
                break;
            }
        } else {
            stale = 0;
        }
        best = best.min(epoch_loss);
    }
    Ok(RelapsePredNet {
        params,
        normalizer: normalizer.clone(),
        config: config.clone(),
        loss_history: history,
    })
}

pub fn predict_window(model: &RelapsePredNet, window: &ObservationWindow) -> Result<f64> {
    if window.dim != model.params.forward_lstm.input_dim {
        return Err(Error::shape(
            "predict_window dim",
            model.params.forward_lstm.input_dim,
            window.dim,
        ));
    }
    Ok(model.params.predict(&[window.input.as_slice()])?[0])
}

impl RelapsePredNet {
    pub fn predict_batch(&self, windows: &[&ObservationWindow]) -> Result<Vec<f64>> {
        windows.iter().map(|w| predict_window(self, w)).collect()
    }

    /// fc2 activations (eval mode) for each window, one row per window.
    pub fn embeddings(&self, windows: &[&ObservationWindow]) -> Result<Matrix> {
        let batch: Vec<&[f64]> = windows.iter().map(|w| w.input.as_slice()).collect();
        self.params.embeddings(&batch)
    }

    pub fn to_text(&self) -> String {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let mut header = standard_header(
            ModelFamily::Rpnet,
            config,
            self.config.seed,
            &self.normalizer,
        );
        header.push((
            "input_dim".into(),
            self.params.forward_lstm.input_dim.to_string(),
        ));
        let mut tensors = self.params.tensors();
        tensors.extend(self.params.state_tensors());
        params_text(&header, &tensors, &self.normalizer).expect("finite normalizer")
    }

    pub(crate) fn from_params(file: &ParamFile) -> Result<Self> {
        let config: RelapsePredNetConfig = serde_json::from_str(file.header_value("config")?)
            .map_err(|e| Error::Format(format!("bad config header: {e}")))?;
        let input_dim: usize = file
            .header_value("input_dim")?
            .parse()
            .map_err(|_| Error::Format("bad input_dim header".into()))?;
        let mut params = NetworkParams::init(&config.shape(input_dim), 0)?;
        load_tensors(file, params.tensors_mut())?;
        load_tensors(file, params.state_tensors_mut())?;
        let normalizer = normalizer_from_params(file)?;
        check_digest(file, &normalizer)?;
        Ok(RelapsePredNet {
            params,
            normalizer,
            config,
            loss_history: Vec::new(),
        })
    }
}
