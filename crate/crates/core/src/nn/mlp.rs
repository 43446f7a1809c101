//! Plain stack of dense layers (used by the encoder-decoder baseline).

use super::dense::{Activation, DenseParams};
use super::matrix::Matrix;
use super::{GradientBundle, Parameters};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseParams>,
    pub activations: Vec<Activation>,
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.push_tensors(&format!("layer{i}"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.push_tensors_mut(&format!("layer{i}"), &mut out);
        }
        out
    }
}

impl Mlp {
    /// `sizes` lists layer widths including the input; one activation per layer.
    pub fn init(sizes: &[usize], activations: &[Activation], init_seed: u64) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::InvalidArgument(
                "need at least one layer and one activation per layer".into(),
            ));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer sizes must be positive".into(),
            ));
        }
        let mut rng = seed::rng(init_seed);
        let layers = sizes
            .windows(2)
            .map(|w| DenseParams::init(w[0], w[1], &mut rng))
            .collect();
        Ok(Mlp {
            layers,
            activations: activations.to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(0)
    }

    /// Activations of every layer, input first.
    pub fn forward_all(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), x.len()));
        }
        let mut acts = vec![x.to_vec()];
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let z = layer.affine(acts.last().expect("non-empty"));
            let a: Vec<f64> = z.into_iter().map(|v| act.apply(v)).collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: "mlp" });
            }
            acts.push(a);
        }
        Ok(acts)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_all(x)?.pop().expect("non-empty"))
    }

    /// Output of the first `n_layers` layers.
    pub fn forward_prefix(&self, x: &[f64], n_layers: usize) -> Result<Vec<f64>> {
        let acts = self.forward_all(x)?;
        Ok(acts[n_layers.min(self.layers.len())].clone())
    }

    /// Accumulates gradients for one sample given dL/d(output).
    pub fn backward(&self, acts: &[Vec<f64>], d_out: &[f64], grads: &mut Mlp) {
        let mut d = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let act = self.activations[l];
            let dz: Vec<f64> = d
                .iter()
                .zip(&acts[l + 1])
                .map(|(g, &y)| g * act.derivative_from_output(y))
                .collect();
            d = self.layers[l].backward(&acts[l], &dz, &mut grads.layers[l]);
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            activations: self.activations.clone(),
        }
    }

    /// Mean squared error over all samples and output dims, with gradients.
    pub fn mse_backward(
        &self,
        inputs: &[&[f64]],
        targets: &[&[f64]],
    ) -> Result<(f64, GradientBundle)> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::shape("mse batch", inputs.len(), targets.len()));
        }
        let scale = 1.0 / (inputs.len() * self.output_dim()) as f64;
        let mut grads = self.zeros_like();
        let mut loss = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            let acts = self.forward_all(x)?;
            let out = acts.last().expect("non-empty");
            if out.len() != t.len() {
                return Err(Error::shape("mse target", out.len(), t.len()));
            }
            let d: Vec<f64> = out
                .iter()
                .zip(t.iter())
                .map(|(o, y)| {
                    loss += (o - y) * (o - y) * scale;
                    2.0 * (o - y) * scale
                })
                .collect();
            self.backward(&acts, &d, &mut grads);
        }
        Ok((loss, GradientBundle::from_parameters(&grads)))
    }

    pub fn mse(&self, inputs: &[&[f64]], targets: &[&[f64]]) -> Result<f64> {
        let mut total = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            let out = self.forward(x)?;
            total += out
                .iter()
                .zip(t.iter())
                .map(|(o, y)| (o - y) * (o - y))
                .sum::<f64>();
        }
        Ok(total / (inputs.len() * self.output_dim()) as f64)
    }
}
