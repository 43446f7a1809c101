//! The relapse predictor graph:
//! bi-LSTM -> dropout -> bn1 -> fc1 (relu) -> bn2 -> fc2 (relu) -> head (sigmoid).

use serde::{Deserialize, Serialize};

use super::batchnorm::{self, BatchNormCache, BatchNormParams};
use super::dense::{Activation, DenseParams};
use super::dropout;
use super::loss::LossKind;
use super::lstm::{
    lstm_backward_recurrent, lstm_run_projected, LstmCellParams, LstmTrace, PackedSequences,
};
use super::matrix::{sigmoid, Matrix};
use super::{GradientBundle, Mode, Parameters};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub dropout_rate: f64,
}

impl NetworkShape {
    pub fn with_input(input_dim: usize) -> Self {
        NetworkShape {
            input_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.fc1 == 0 || self.fc2 == 0 {
            return Err(Error::InvalidArgument(
                "network dimensions must be positive".into(),
            ));
        }
        dropout::check_rate(self.dropout_rate)
    }
}

impl Default for NetworkShape {
    fn default() -> Self {
        NetworkShape {
            input_dim: crate::data::DAY_DIM,
            hidden_dim: 128,
            fc1: 128,
            fc2: 64,
            dropout_rate: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub forward_lstm: LstmCellParams,
    pub backward_lstm: LstmCellParams,
    pub bn1: BatchNormParams,
    pub bn2: BatchNormParams,
    pub fc1: DenseParams,
    pub fc2: DenseParams,
    pub head: DenseParams,
    pub dropout_rate: f64,
}

impl Parameters for NetworkParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.forward_lstm.push_tensors("fwd", &mut out);
        self.backward_lstm.push_tensors("bwd", &mut out);
        self.bn1.push_tensors("bn1", &mut out);
        self.fc1.push_tensors("fc1", &mut out);
        self.bn2.push_tensors("bn2", &mut out);
        self.fc2.push_tensors("fc2", &mut out);
        self.head.push_tensors("head", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        self.forward_lstm.push_tensors_mut("fwd", &mut out);
        self.backward_lstm.push_tensors_mut("bwd", &mut out);
        self.bn1.push_tensors_mut("bn1", &mut out);
        self.fc1.push_tensors_mut("fc1", &mut out);
        self.bn2.push_tensors_mut("bn2", &mut out);
        self.fc2.push_tensors_mut("fc2", &mut out);
        self.head.push_tensors_mut("head", &mut out);
        out
    }
}

/// Forward activations kept for the backward pass.
struct Cache {
    packed: PackedSequences,
    traces: Vec<(LstmTrace, LstmTrace)>,
    mask: Option<Matrix>,
    bn1: BatchNormCache,
    n1: Matrix,
    a1: Matrix,
    bn2: BatchNormCache,
    n2: Matrix,
    a2: Matrix,
    probabilities: Vec<f64>,
    stats: [Option<(Vec<f64>, Vec<f64>)>; 2],
}

/// Result of a training-mode pass.
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub loss: f64,
    pub grads: GradientBundle,
    pub probabilities: Vec<f64>,
    batch_stats: [Option<(Vec<f64>, Vec<f64>)>; 2],
}

fn dense_batch(
    layer: &DenseParams,
    input: &Matrix,
    act: Activation,
    name: &'static str,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(input.rows(), layer.output_dim());
    for r in 0..input.rows() {
        let z = layer.affine(input.row(r));
        for (o, v) in out.row_mut(r).iter_mut().zip(z) {
            *o = act.apply(v);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { layer: name });
    }
    Ok(out)
}

impl NetworkParams {
    pub fn init(shape: &NetworkShape, init_seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = seed::rng(init_seed);
        Ok(NetworkParams {
            forward_lstm: LstmCellParams::init(shape.input_dim, shape.hidden_dim, &mut rng),
            backward_lstm: LstmCellParams::init(shape.input_dim, shape.hidden_dim, &mut rng),
            bn1: BatchNormParams::new(2 * shape.hidden_dim),
            fc1: DenseParams::init(2 * shape.hidden_dim, shape.fc1, &mut rng),
            bn2: BatchNormParams::new(shape.fc1),
            fc2: DenseParams::init(shape.fc1, shape.fc2, &mut rng),
            head: DenseParams::init(shape.fc2, 1, &mut rng),
            dropout_rate: shape.dropout_rate,
        })
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            input_dim: self.forward_lstm.input_dim,
            hidden_dim: self.forward_lstm.hidden_dim,
            fc1: self.fc1.output_dim(),
            fc2: self.fc2.output_dim(),
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            forward_lstm: self.forward_lstm.zeros_like(),
            backward_lstm: self.backward_lstm.zeros_like(),
            bn1: self.bn1.zeros_like(),
            bn2: self.bn2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            head: self.head.zeros_like(),
            dropout_rate: self.dropout_rate,
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn state_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.bn1.push_state("bn1", &mut out);
        self.bn2.push_state("bn2", &mut out);
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        self.bn1.push_state_mut("bn1", &mut out);
        self.bn2.push_state_mut("bn2", &mut out);
        out
    }

    pub fn apply_batch_stats(&mut self, out: &BackwardOutput) {
        if let Some((m, v)) = &out.batch_stats[0] {
            batchnorm::update_running(&mut self.bn1, m, v);
        }
        if let Some((m, v)) = &out.batch_stats[1] {
            batchnorm::update_running(&mut self.bn2, m, v);
        }
    }

    fn run(&self, batch: &[&[f64]], mode: Mode, dropout_seed: u64) -> Result<Cache> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let hd = self.forward_lstm.hidden_dim;
        let in_dim = self.forward_lstm.input_dim;
        let packed = PackedSequences::new(batch, in_dim)?;
        let proj_f = self.forward_lstm.project_packed(&packed);
        let proj_b = self.backward_lstm.project_packed(&packed);
        let mut traces = Vec::with_capacity(batch.len());
        let mut z = Matrix::zeros(batch.len(), 2 * hd);
        for b in 0..batch.len() {
            let r = packed.range(b);
            let p = r.start * 4 * hd..r.end * 4 * hd;
            let f = lstm_run_projected(&self.forward_lstm, &proj_f[p.clone()], r.len(), false)?;
            let rv = lstm_run_projected(&self.backward_lstm, &proj_b[p], r.len(), true)?;
            let row = z.row_mut(b);
            row[..hd].copy_from_slice(f.final_hidden());
            row[hd..].copy_from_slice(rv.final_hidden());
            traces.push((f, rv));
        }
        let mask = if mode == Mode::Train && self.dropout_rate > 0.0 {
            let mut rng = seed::rng(dropout_seed);
            let m = dropout::mask(z.len(), self.dropout_rate, &mut rng);
            let m = Matrix::from_vec(z.rows(), z.cols(), m)?;
            for (v, s) in z.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *v *= s;
            }
            Some(m)
        } else {
            None
        };
        let (n1, bn1, s1) = batchnorm::forward_cached(&z, &self.bn1, mode)?;
        let a1 = dense_batch(&self.fc1, &n1, Activation::Relu, "fc1")?;
        let (n2, bn2, s2) = batchnorm::forward_cached(&a1, &self.bn2, mode)?;
        let a2 = dense_batch(&self.fc2, &n2, Activation::Relu, "fc2")?;
        let probabilities: Vec<f64> = (0..a2.rows())
            .map(|r| sigmoid(self.head.affine(a2.row(r))[0]))
            .collect();
        if probabilities.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { layer: "head" });
        }
        Ok(Cache {
            packed,
            traces,
            mask,
            bn1,
            n1,
            a1,
            bn2,
            n2,
            a2,
            probabilities,
            stats: [s1, s2],
        })
    }

    /// Relapse probabilities in eval mode.
    pub fn predict(&self, batch: &[&[f64]]) -> Result<Vec<f64>> {
        Ok(self.run(batch, Mode::Eval, 0)?.probabilities)
    }

    /// Probabilities for an explicit mode; train mode does not update the
    /// running statistics.
    pub fn forward(&self, batch: &[&[f64]], mode: Mode, dropout_seed: u64) -> Result<Vec<f64>> {
        Ok(self.run(batch, mode, dropout_seed)?.probabilities)
    }

    /// Final hidden-layer (fc2) activations in eval mode, one row per sample.
    pub fn embeddings(&self, batch: &[&[f64]]) -> Result<Matrix> {
        Ok(self.run(batch, Mode::Eval, 0)?.a2)
    }

    /// Post-relu fc1 activations, one row per sample.
    pub fn fc1_activations(
        &self,
        batch: &[&[f64]],
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<Matrix> {
        Ok(self.run(batch, mode, dropout_seed)?.a1)
    }

    /// Loss on a batch, used by the finite-difference checker.
    pub fn loss(
        &self,
        batch: &[&[f64]],
        labels: &[f64],
        loss: LossKind,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<f64> {
        let p = self.forward(batch, mode, dropout_seed)?;
        Ok(loss.evaluate(&p, labels)?.0)
    }
}

/// Loss and exact reverse-mode gradients for every trainable tensor.
pub fn network_backward(
    params: &NetworkParams,
    batch: &[&[f64]],
    labels: &[f64],
    loss: LossKind,
    mode: Mode,
    dropout_seed: u64,
) -> Result<BackwardOutput> {
    if labels.len() != batch.len() {
        return Err(Error::shape(
            "network_backward labels",
            batch.len(),
            labels.len(),
        ));
    }
    let cache = params.run(batch, mode, dropout_seed)?;
    let (loss_value, dp) = loss.evaluate(&cache.probabilities, labels)?;
    let mut grads = params.zeros_like();
    let n = batch.len();
    let hd = params.forward_lstm.hidden_dim;

    let mut dn2 = Matrix::zeros(n, params.fc1.output_dim());
    for b in 0..n {
        let p = cache.probabilities[b];
        let dlogit = [dp[b] * p * (1.0 - p)];
        let da2 = params
            .head
            .backward(cache.a2.row(b), &dlogit, &mut grads.head);
        let dz2: Vec<f64> = da2
            .iter()
            .zip(cache.a2.row(b))
            .map(|(d, &a)| d * Activation::Relu.derivative_from_output(a))
            .collect();
        let d = params.fc2.backward(cache.n2.row(b), &dz2, &mut grads.fc2);
        dn2.row_mut(b).copy_from_slice(&d);
    }
    let da1 = batchnorm::backward(&params.bn2, &cache.bn2, &dn2, &mut grads.bn2);
    let mut dn1 = Matrix::zeros(n, 2 * hd);
    for b in 0..n {
        let dz1: Vec<f64> = da1
            .row(b)
            .iter()
            .zip(cache.a1.row(b))
            .map(|(d, &a)| d * Activation::Relu.derivative_from_output(a))
            .collect();
        let d = params.fc1.backward(cache.n1.row(b), &dz1, &mut grads.fc1);
        dn1.row_mut(b).copy_from_slice(&d);
    }
    let mut dz = batchnorm::backward(&params.bn1, &cache.bn1, &dn1, &mut grads.bn1);
    if let Some(mask) = &cache.mask {
        for (d, s) in dz.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *d *= s;
        }
    }
    let rows = cache.packed.total_steps();
    let mut da_f = vec![0.0; rows * 4 * hd];
    let mut da_b = vec![0.0; rows * 4 * hd];
    for b in 0..n {
        let r = cache.packed.range(b);
        let p = r.start * 4 * hd..r.end * 4 * hd;
        let (f, rv) = &cache.traces[b];
        let row = dz.row(b);
        lstm_backward_recurrent(
            &params.forward_lstm,
            f,
            false,
            &row[..hd],
            &mut grads.forward_lstm,
            &mut da_f[p.clone()],
        );
        lstm_backward_recurrent(
            &params.backward_lstm,
            rv,
            true,
            &row[hd..],
            &mut grads.backward_lstm,
            &mut da_b[p],
        );
    }
    params
        .forward_lstm
        .accumulate_input_grads(&cache.packed, &da_f, &mut grads.forward_lstm);
    params
        .backward_lstm
        .accumulate_input_grads(&cache.packed, &da_b, &mut grads.backward_lstm);
    let bundle = GradientBundle::from_parameters(&grads);
    if bundle.entries().iter().any(|(_, m)| !m.is_finite()) {
        return Err(Error::NonFinite { layer: "gradients" });
    }
    Ok(BackwardOutput {
        loss: loss_value,
        grads: bundle,
        probabilities: cache.probabilities,
        batch_stats: cache.stats,
    })
}
