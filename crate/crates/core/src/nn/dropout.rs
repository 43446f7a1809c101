use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::seed;

/// Inverted-dropout scale factors: 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub(crate) fn mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

pub fn dropout_apply(x: &[f64], rate: f64, mode: Mode, rng_seed: u64) -> Result<Vec<f64>> {
    check_rate(rate)?;
    match mode {
        Mode::Eval => Ok(x.to_vec()),
        Mode::Train => {
            let m = mask(x.len(), rate, &mut seed::rng(rng_seed));
            Ok(x.iter().zip(m).map(|(v, s)| v * s).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(dropout_apply(&x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(dropout_apply(&x, 0.0, Mode::Eval, 1).unwrap(), x);
    }

    #[test]
    fn eval_is_identity() {
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(dropout_apply(&x, 0.9, Mode::Eval, 3).unwrap(), x);
    }

    #[test]
    fn train_preserves_mean() {
        let x = vec![1.0; 100_000];
        let y = dropout_apply(&x, 0.2, Mode::Train, 42).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
        assert!(y.iter().all(|&v| v == 0.0 || v == 1.25));
    }

    #[test]
    fn deterministic_and_rate_checked() {
        let x = vec![1.0; 64];
        assert_eq!(
            dropout_apply(&x, 0.5, Mode::Train, 9).unwrap(),
            dropout_apply(&x, 0.5, Mode::Train, 9).unwrap()
        );
        assert!(dropout_apply(&x, 1.0, Mode::Train, 9).is_err());
        assert!(dropout_apply(&x, -0.1, Mode::Eval, 9).is_err());
    }
}
