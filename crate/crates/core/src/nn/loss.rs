use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    SoftF2,
}

impl LossKind {
    pub fn evaluate(self, p: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            LossKind::Bce => bce_loss(p, y),
            LossKind::SoftF2 => soft_f2_loss(p, y),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "f2" | "soft_f2" => Ok(LossKind::SoftF2),
            other => Err(Error::InvalidArgument(format!("unknown loss '{other}'"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::SoftF2 => "f2",
        })
    }
}

fn check_lengths(p: &[f64], y: &[f64]) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::shape("loss labels", p.len(), y.len()));
    }
    if p.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy. Probabilities are clamped to
/// `[1e-7, 1 - 1e-7]`; the gradient is taken at the clamped value and passed
/// straight through the clamp.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths(p, y)?;
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        grad.push((-(yi / pc) + (1.0 - yi) / (1.0 - pc)) / n);
    }
    Ok((loss / n, grad))
}

/// Differentiable F2 surrogate from soft confusion counts:
/// `1 - 5 TP / (5 TP + 4 FN + FP)`. Defined as 1 (zero gradient) when the
/// batch has no positive label.
pub fn soft_f2_loss(p: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths(p, y)?;
    let positives: f64 = y.iter().sum();
    if positives <= 0.0 {
        return Ok((1.0, vec![0.0; p.len()]));
    }
    let tp: f64 = p.iter().zip(y).map(|(pi, yi)| pi * yi).sum();
    let fp: f64 = p.iter().zip(y).map(|(pi, yi)| pi * (1.0 - yi)).sum();
    let fn_: f64 = p.iter().zip(y).map(|(pi, yi)| (1.0 - pi) * yi).sum();
    let denom = 5.0 * tp + 4.0 * fn_ + fp;
    let loss = 1.0 - 5.0 * tp / denom;
    // d denom / d p_i = 5 y_i - 4 y_i + (1 - y_i) = 1
    let grad = y
        .iter()
        .map(|&yi| 5.0 * (tp - yi * denom) / (denom * denom))
        .collect();
    Ok((loss, grad))
}
