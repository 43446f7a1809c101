use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Per-dimension min-max scaler fitted on training rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub fitted_on: String,
}

impl Normalizer {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Maps into `[0, 1]` with clamping; degenerate dimensions map to 0.5.
    pub fn apply_in_place(&self, row: &mut [f64]) {
        let d = self.dim();
        for (k, v) in row.iter_mut().enumerate() {
            let (lo, hi) = (self.min[k % d], self.max[k % d]);
            *v = if hi > lo {
                ((*v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.5
            };
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.min.iter().chain(&self.max) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Fits on rows of equal width.
pub fn fit_normalizer<'a, I>(rows: I, fitted_on: impl Into<String>) -> Result<Normalizer>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = rows.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("normalizer needs at least one row".into()))?;
    let mut min = first.to_vec();
    let mut max = first.to_vec();
    for row in iter {
        if row.len() != min.len() {
            return Err(Error::shape("fit_normalizer", min.len(), row.len()));
        }
        for (k, &v) in row.iter().enumerate() {
            min[k] = min[k].min(v);
            max[k] = max[k].max(v);
        }
    }
    Ok(Normalizer {
        min,
        max,
        fitted_on: fitted_on.into(),
    })
}

/// Applies the scaler to a sequence of flat rows (e.g. a window's days).
/// Input may hold several rows back to back.
pub fn apply_normalizer(normalizer: &Normalizer, values: &[f64]) -> Result<Vec<f64>> {
    if !values.len().is_multiple_of(normalizer.dim()) {
        return Err(Error::shape(
            "apply_normalizer",
            format!("multiple of {}", normalizer.dim()),
            values.len(),
        ));
    }
    let mut out = values.to_vec();
    normalizer.apply_in_place(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scaling_rules() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0, 3.0], vec![10.0, 3.0]];
        let n = fit_normalizer(rows.iter().map(|r| r.as_slice()), "fold0").unwrap();
        assert_eq!(apply_normalizer(&n, &[5.0, 3.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(apply_normalizer(&n, &[20.0, -1.0]).unwrap(), vec![1.0, 0.5]);
        assert_eq!(
            apply_normalizer(&n, &[-4.0, 99.0, 5.0, 3.0]).unwrap(),
            vec![0.0, 0.5, 0.5, 0.5]
        );
        assert!(apply_normalizer(&n, &[1.0]).is_err());
    }

    #[test]
    fn no_rows_is_error() {
        assert!(fit_normalizer(std::iter::empty::<&[f64]>(), "x").is_err());
    }

    proptest! {
        #[test]
        fn output_in_unit_interval(
            train in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..8),
            probe in prop::collection::vec(-1e4f64..1e4, 4),
        ) {
            let n = fit_normalizer(train.iter().map(|r| r.as_slice()), "p").unwrap();
            for v in apply_normalizer(&n, &probe).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
