//! From-scratch differentiable numerics.
//!
//! The network graph is fixed, so every layer carries a hand-written
//! backward pass instead of a general autodiff tape. All arithmetic is `f64`.

pub mod adam;
pub mod batchnorm;
pub mod dense;
pub mod dropout;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod matrix;
pub mod mlp;
pub mod network;
pub mod persist;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use batchnorm::{batchnorm_forward, BatchNormParams};
pub use dense::{dense_forward, Activation, DenseParams};
pub use dropout::dropout_apply;
pub use gradcheck::{finite_diff_grad_check, GradCheckReport};
pub use loss::{bce_loss, soft_f2_loss, LossKind};
pub use lstm::{bilstm_forward, lstm_cell_step, LstmCellParams};
pub use matrix::Matrix;
pub use network::{network_backward, NetworkParams, NetworkShape};

use crate::error::{Error, Result};

/// Train/eval switch for batch-norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything exposing an ordered list of named trainable tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

/// One gradient tensor per named trainable parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    entries: Vec<(String, Matrix)>,
}

impl GradientBundle {
    pub fn zeros_like<P: Parameters + ?Sized>(params: &P) -> Self {
        GradientBundle {
            entries: params
                .tensors()
                .into_iter()
                .map(|(n, m)| (n, m.zeros_like()))
                .collect(),
        }
    }

    /// Collects the trainable tensors of a parameter-shaped gradient holder.
    pub fn from_parameters<P: Parameters + ?Sized>(grads: &P) -> Self {
        GradientBundle {
            entries: grads
                .tensors()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[(String, Matrix)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Matrix)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, m)| m.squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, m)| m.as_slice().iter().all(|&v| v == 0.0))
    }

    /// Checks names and shapes against a parameter set.
    pub fn check_matches<P: Parameters + ?Sized>(&self, params: &P) -> Result<()> {
        let tensors = params.tensors();
        if tensors.len() != self.entries.len() {
            return Err(Error::shape(
                "GradientBundle",
                format!("{} tensors", tensors.len()),
                format!("{} tensors", self.entries.len()),
            ));
        }
        for ((pn, pm), (gn, gm)) in tensors.iter().zip(&self.entries) {
            if pn != gn || pm.shape() != gm.shape() {
                return Err(Error::shape(
                    "GradientBundle",
                    format!("{pn} {:?}", pm.shape()),
                    format!("{gn} {:?}", gm.shape()),
                ));
            }
        }
        Ok(())
    }
}
