//! Class-distance distributions and cluster separability.

use serde::{Deserialize, Serialize};

use crate::data::{fit_normalizer, ObservationWindow};
use crate::error::{Error, Result};
use crate::models::RelapsePredNet;

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistances {
    /// Non-relapse to non-relapse, each unordered pair once.
    pub intra: Vec<f64>,
    /// Every non-relapse/relapse pair.
    pub inter: Vec<f64>,
}

/// Time-mean each window, min-max scale across the given windows, then
/// collect pairwise Euclidean distances.
pub fn class_distance_distributions(windows: &[&ObservationWindow]) -> Result<ClassDistances> {
    let neg: Vec<usize> = (0..windows.len()).filter(|&i| !windows[i].label).collect();
    let pos: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].label).collect();
    if neg.is_empty() || pos.is_empty() {
        return Err(Error::InvalidArgument(
            "both classes must be present".into(),
        ));
    }
    let mut means: Vec<Vec<f64>> = windows.iter().map(|w| w.time_mean()).collect();
    let norm = fit_normalizer(means.iter().map(Vec::as_slice), "class distances")?;
    means.iter_mut().for_each(|m| norm.apply_in_place(m));
    let mut intra = Vec::with_capacity(neg.len() * (neg.len().saturating_sub(1)) / 2);
    for (k, &i) in neg.iter().enumerate() {
        for &j in &neg[k + 1..] {
            intra.push(euclidean(&means[i], &means[j]));
        }
    }
    let mut inter = Vec::with_capacity(neg.len() * pos.len());
    for &i in &neg {
        for &j in &pos {
            inter.push(euclidean(&means[i], &means[j]));
        }
    }
    Ok(ClassDistances { intra, inter })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl DistanceSummary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return DistanceSummary {
                count: 0,
                mean: 0.0,
                median: 0.0,
                min: 0.0,
                max: 0.0,
            };
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        DistanceSummary {
            count: n,
            mean: s.iter().sum::<f64>() / n as f64,
            median,
            min: s[0],
            max: s[n - 1],
        }
    }
}

fn pairwise(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = euclidean(&points[i], &points[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Mean silhouette with Euclidean distance. Points in singleton clusters and
/// points with `max(a, b) == 0` score 0.
pub fn silhouette_coefficient(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::shape("silhouette", points.len(), labels.len()));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::InvalidArgument(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let n = points.len();
    let d = pairwise(points);
    let sizes: Vec<usize> = clusters
        .iter()
        .map(|c| labels.iter().filter(|l| *l == c).count())
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; clusters.len()];
        for j in 0..n {
            if i != j {
                let k = clusters.binary_search(&labels[j]).expect("label present");
                sums[k] += d[i * n + j];
            }
        }
        let own = clusters.binary_search(&labels[i]).expect("label present");
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..clusters.len())
            .filter(|&k| k != own)
            .map(|k| sums[k] / sizes[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Fraction of points whose nearest other point (lowest index on ties)
/// shares their label.
pub fn separability_index(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.len() < 2 {
        return Err(Error::InvalidArgument(
            "separability index needs at least 2 labelled points".into(),
        ));
    }
    let n = points.len();
    let mut same = 0usize;
    for i in 0..n {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..n {
            if j == i {
                continue;
            }
            let dist = euclidean(&points[i], &points[j]);
            if dist < best.0 {
                best = (dist, j);
            }
        }
        if labels[best.1] == labels[i] {
            same += 1;
        }
    }
    Ok(same as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub window_id: String,
    pub embedding: Vec<f64>,
    pub label: bool,
}

pub fn window_id(w: &ObservationWindow) -> String {
    format!("{}:{}", w.patient_id, w.window_start)
}

/// Eval-mode fc2 activations for normalized windows.
pub fn export_embeddings(
    model: &RelapsePredNet,
    windows: &[&ObservationWindow],
) -> Result<Vec<EmbeddingRow>> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let m = model.embeddings(windows)?;
    Ok(windows
        .iter()
        .enumerate()
        .map(|(i, w)| EmbeddingRow {
            window_id: window_id(w),
            embedding: m.row(i).to_vec(),
            label: w.label,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_score_zero() {
        let pts = vec![vec![1.0, 1.0]; 4];
        assert_eq!(silhouette_coefficient(&pts, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert!(silhouette_coefficient(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn tight_clusters() {
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        assert!(silhouette_coefficient(&pts, &[0, 0, 1, 1]).unwrap() > 0.9);
        assert_eq!(separability_index(&pts, &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn alternating_line() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        assert_eq!(separability_index(&pts, &labels).unwrap(), 0.0);
    }

    #[test]
    fn singleton_cluster_points_score_zero() {
        let pts = vec![vec![0.0], vec![1.0], vec![5.0]];
        // point 2 is alone; points 0 and 1: a = 1, b = 5 and 4
        let s = silhouette_coefficient(&pts, &[0, 0, 1]).unwrap();
        assert!((s - ((1.0 - 0.2) + (1.0 - 0.25)) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn summary_stats() {
        let s = DistanceSummary::of(&[3.0, 1.0, 2.0, 4.0]);
        assert_eq!(
            (s.count, s.mean, s.median, s.min, s.max),
            (4, 2.5, 2.5, 1.0, 4.0)
        );
    }
}
