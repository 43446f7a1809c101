//! Text persistence for named tensors.
//!
//! ```text
//! RPNET-PARAMS v1
//! # family rpnet
//! fc1.weights 2 3
//! 1.0000000000000000e0 ...
//! ```
//!
//! Header lines start with `# key value`; each tensor record is a
//! `name rows cols` line followed by one line per row of 17-significant-digit
//! values.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &str = "RPNET-PARAMS v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamFile {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

impl ParamFile {
    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    pub fn header_value(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing header '{key}'")))
    }
}

pub fn write_params(header: &[(String, String)], tensors: &[(String, &Matrix)]) -> String {
    let mut out = String::new();
    out.push_str(PARAMS_MAGIC);
    out.push('\n');
    for (k, v) in header {
        let _ = writeln!(out, "# {k} {v}");
    }
    for (name, m) in tensors {
        let _ = writeln!(out, "{name} {} {}", m.rows(), m.cols());
        for r in 0..m.rows() {
            let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn read_params(text: &str) -> Result<ParamFile> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim() == PARAMS_MAGIC => {}
        other => {
            return Err(Error::Format(format!(
                "expected '{PARAMS_MAGIC}', found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut file = ParamFile::default();
    let mut pending: Option<(String, usize, usize)> = None;
    let mut values: Vec<f64> = Vec::new();
    let finish = |pending: &mut Option<(String, usize, usize)>,
                  values: &mut Vec<f64>,
                  file: &mut ParamFile|
     -> Result<()> {
        if let Some((name, r, c)) = pending.take() {
            let m = Matrix::from_vec(r, c, std::mem::take(values))
                .map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
            file.tensors.push((name, m));
        }
        Ok(())
    };
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            file.header.insert(k.to_string(), v.trim().to_string());
            continue;
        }
        let expecting_values = pending
            .as_ref()
            .map(|(_, r, c)| values.len() < r * c)
            .unwrap_or(false);
        if expecting_values {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number '{tok}'")))?;
                values.push(v);
            }
            continue;
        }
        finish(&mut pending, &mut values, &mut file)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad tensor header '{line}'")));
        }
        let rows = parts[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad rows in '{line}'")))?;
        let cols = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad cols in '{line}'")))?;
        pending = Some((parts[0].to_string(), rows, cols));
    }
    finish(&mut pending, &mut values, &mut file)?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_missing_magic() {
        assert!(read_params("fc 1 1\n1.0\n").is_err());
    }

    #[test]
    fn rejects_short_tensor() {
        let text = format!("{PARAMS_MAGIC}\nw 2 2\n1 2 3\n");
        assert!(read_params(&text).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            rows in 1usize..4,
            cols in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let vals: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1e6..1e6) * rng.gen::<f64>()).collect();
            let m = Matrix::from_vec(rows, cols, vals).unwrap();
            let header = vec![("family".to_string(), "rpnet".to_string())];
            let text = write_params(&header, &[("w".to_string(), &m), ("b".to_string(), &m)]);
            let back = read_params(&text).unwrap();
            prop_assert_eq!(back.header_value("family").unwrap(), "rpnet");
            prop_assert_eq!(back.tensor("w").unwrap(), &m);
            prop_assert_eq!(back.tensors.len(), 2);
        }
    }
}
