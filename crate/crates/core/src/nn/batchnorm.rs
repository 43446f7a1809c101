use super::matrix::Matrix;
use super::Mode;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-feature batch normalization. `gamma`/`beta` are trainable; the
/// running statistics are state updated in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn new(features: usize) -> Self {
        BatchNormParams {
            gamma: Matrix::filled(features, 1, 1.0),
            beta: Matrix::zeros(features, 1),
            running_mean: Matrix::zeros(features, 1),
            running_var: Matrix::filled(features, 1, 1.0),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.rows()
    }

    pub fn zeros_like(&self) -> Self {
        BatchNormParams {
            gamma: self.gamma.zeros_like(),
            beta: self.beta.zeros_like(),
            running_mean: self.running_mean.zeros_like(),
            running_var: self.running_var.zeros_like(),
            momentum: self.momentum,
            epsilon: self.epsilon,
        }
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Matrix)>,
    ) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub(crate) fn push_state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{prefix}.running_mean"), &self.running_mean));
        out.push((format!("{prefix}.running_var"), &self.running_var));
    }

    pub(crate) fn push_state_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Matrix)>,
    ) {
        out.push((format!("{prefix}.running_mean"), &mut self.running_mean));
        out.push((format!("{prefix}.running_var"), &mut self.running_var));
    }
}

/// What the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub(crate) struct BatchNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

pub(crate) fn forward_cached(
    batch: &Matrix,
    params: &BatchNormParams,
    mode: Mode,
) -> Result<(Matrix, BatchNormCache, Option<(Vec<f64>, Vec<f64>)>)> {
    let (n, d) = batch.shape();
    if d != params.features() {
        return Err(Error::shape("batchnorm features", params.features(), d));
    }
    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "batch-norm in train mode needs at least 2 samples, got {n}"
                )));
            }
            let mut mean = vec![0.0; d];
            for r in 0..n {
                for (m, x) in mean.iter_mut().zip(batch.row(r)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; d];
            for r in 0..n {
                for ((v, x), m) in var.iter_mut().zip(batch.row(r)).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        Mode::Eval => (
            params.running_mean.as_slice().to_vec(),
            params.running_var.as_slice().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + params.epsilon).sqrt())
        .collect();
    let mut normalized = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let gamma = params.gamma.as_slice();
    let beta = params.beta.as_slice();
    for r in 0..n {
        let x = batch.row(r);
        for j in 0..d {
            let xh = (x[j] - mean[j]) * inv_std[j];
            normalized.set(r, j, xh);
            out.set(r, j, gamma[j] * xh + beta[j]);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { layer: "batchnorm" });
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mode,
        },
        batch_stats,
    ))
}

pub(crate) fn update_running(params: &mut BatchNormParams, mean: &[f64], var: &[f64]) {
    let m = params.momentum;
    for (r, b) in params.running_mean.as_mut_slice().iter_mut().zip(mean) {
        *r = (1.0 - m) * *r + m * b;
    }
    for (r, b) in params.running_var.as_mut_slice().iter_mut().zip(var) {
        *r = (1.0 - m) * *r + m * b;
    }
}

/// Accumulates `gamma`/`beta` gradients and returns the input gradient.
pub(crate) fn backward(
    params: &BatchNormParams,
    cache: &BatchNormCache,
    d_out: &Matrix,
    grads: &mut BatchNormParams,
) -> Matrix {
    let (n, d) = d_out.shape();
    let gamma = params.gamma.as_slice();
    let mut dx = Matrix::zeros(n, d);
    let mut sum_dxh = vec![0.0; d];
    let mut sum_dxh_xh = vec![0.0; d];
    {
        let dg = grads.gamma.as_mut_slice();
        for r in 0..n {
            let dy = d_out.row(r);
            let xh = cache.normalized.row(r);
            for j in 0..d {
                dg[j] += dy[j] * xh[j];
                let dxh = dy[j] * gamma[j];
                sum_dxh[j] += dxh;
                sum_dxh_xh[j] += dxh * xh[j];
            }
        }
    }
    {
        let db = grads.beta.as_mut_slice();
        for r in 0..n {
            for (b, dy) in db.iter_mut().zip(d_out.row(r)) {
                *b += dy;
            }
        }
    }
    let nf = n as f64;
    for r in 0..n {
        let dy = d_out.row(r);
        let xh = cache.normalized.row(r);
        for j in 0..d {
            let dxh = dy[j] * gamma[j];
            let v = match cache.mode {
                Mode::Train => {
                    cache.inv_std[j] / nf * (nf * dxh - sum_dxh[j] - xh[j] * sum_dxh_xh[j])
                }
                Mode::Eval => dxh * cache.inv_std[j],
            };
            dx.set(r, j, v);
        }
    }
    dx
}

/// Normalizes `batch` (samples x features). Returns the output and the
/// parameters with running statistics updated (train mode only).
pub fn batchnorm_forward(
    batch: &Matrix,
    params: &BatchNormParams,
    mode: Mode,
) -> Result<(Matrix, BatchNormParams)> {
    let (out, _, stats) = forward_cached(batch, params, mode)?;
    let mut updated = params.clone();
    if let Some((mean, var)) = stats {
        update_running(&mut updated, &mean, &var);
    }
    Ok((out, updated))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_feature_maps_to_beta() {
        let batch = Matrix::from_vec(3, 2, vec![4.0, 1.0, 4.0, 2.0, 4.0, 3.0]).unwrap();
        let mut p = BatchNormParams::new(2);
        p.beta = Matrix::column(vec![0.7, 0.0]);
        let (out, _) = batchnorm_forward(&batch, &p, Mode::Train).unwrap();
        for r in 0..3 {
            assert_eq!(out.get(r, 0), 0.7);
        }
    }

    #[test]
    fn train_mode_standardizes() {
        let vals = vec![1.0, 10.0, 2.0, 20.0, 4.0, 30.0, 7.0, 40.0];
        let batch = Matrix::from_vec(4, 2, vals.clone()).unwrap();
        let p = BatchNormParams::new(2);
        let (out, updated) = batchnorm_forward(&batch, &p, Mode::Train).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| batch.get(r, j)).collect();
            let m = col.iter().sum::<f64>() / 4.0;
            let bv = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            let o: Vec<f64> = (0..4).map(|r| out.get(r, j)).collect();
            let om = o.iter().sum::<f64>() / 4.0;
            let ov = o.iter().map(|x| (x - om) * (x - om)).sum::<f64>() / 4.0;
            assert!(om.abs() < 1e-9);
            assert!((ov - bv / (bv + p.epsilon)).abs() < 1e-9);
            let rm = updated.running_mean.get(j, 0);
            assert!((rm - 0.1 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_hand_value() {
        let mut p = BatchNormParams::new(1);
        p.gamma = Matrix::column(vec![2.0]);
        p.beta = Matrix::column(vec![1.0]);
        let batch = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let (out, _) = batchnorm_forward(&batch, &p, Mode::Eval).unwrap();
        assert!((out.get(0, 0) - (2.0 * 0.5 / (1.0f64 + 1e-5).sqrt() + 1.0)).abs() < 1e-15);
        assert!((out.get(0, 0) - 2.0).abs() < 1e-5);
    }

    #[test]
    fn train_mode_rejects_single_sample() {
        let p = BatchNormParams::new(2);
        let batch = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(batchnorm_forward(&batch, &p, Mode::Train).is_err());
    }
}
