use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{sigmoid, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Fully connected layer; `weights` is `out x in`, `bias` is `out x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weights: Matrix,
    pub bias: Matrix,
}

impl DenseParams {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        DenseParams {
            weights: Matrix::glorot(output_dim, input_dim, rng),
            bias: Matrix::zeros(output_dim, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        DenseParams {
            weights: self.weights.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Pre-activation `Wx + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.as_slice().to_vec();
        self.weights.matvec_acc(x, &mut z);
        z
    }

    /// Accumulates parameter gradients for pre-activation gradient `dz` and
    /// returns the input gradient.
    pub fn backward(&self, x: &[f64], dz: &[f64], grads: &mut DenseParams) -> Vec<f64> {
        grads.weights.add_outer(1.0, dz, x);
        for (g, d) in grads.bias.as_mut_slice().iter_mut().zip(dz) {
            *g += d;
        }
        let mut dx = vec![0.0; x.len()];
        self.weights.matvec_t_acc(dz, &mut dx);
        dx
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{prefix}.weights"), &self.weights));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Matrix)>,
    ) {
        out.push((format!("{prefix}.weights"), &mut self.weights));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

pub fn dense_forward(
    x: &[f64],
    weights: &Matrix,
    bias: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    if weights.cols() != x.len() {
        return Err(Error::shape("dense_forward input", weights.cols(), x.len()));
    }
    if weights.rows() != bias.len() {
        return Err(Error::shape(
            "dense_forward bias",
            weights.rows(),
            bias.len(),
        ));
    }
    let mut z = bias.to_vec();
    weights.matvec_acc(x, &mut z);
    Ok(z.into_iter().map(|v| activation.apply(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linear_is_identity() {
        let x = vec![0.3, -1.2, 4.0];
        let y = dense_forward(&x, &Matrix::identity(3), &[0.0; 3], Activation::Linear).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_return_bias() {
        let b = vec![1.5, -2.0];
        let y = dense_forward(
            &[7.0, 8.0, 9.0],
            &Matrix::zeros(2, 3),
            &b,
            Activation::Linear,
        )
        .unwrap();
        assert_eq!(y, b);
    }

    #[test]
    fn hand_evaluated_relu() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = dense_forward(&[1.0, 1.0], &w, &[0.0, 0.0], Activation::Relu).unwrap();
        assert_eq!(y, vec![3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let w = Matrix::zeros(2, 3);
        assert!(dense_forward(&[1.0, 2.0], &w, &[0.0, 0.0], Activation::Relu).is_err());
        assert!(dense_forward(&[1.0, 2.0, 3.0], &w, &[0.0], Activation::Relu).is_err());
    }
}
