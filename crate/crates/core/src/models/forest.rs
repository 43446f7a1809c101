//! Random-forest baseline on window time-means.
//!
//! CART trees with Gini impurity, bootstrap rows and `floor(sqrt(d))`
//! candidate features per split. A split sends `x <= threshold` left, where
//! the threshold is always an observed training value, so the trees depend
//! only on the order of each feature.

use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, ObservationWindow};
use crate::error::{Error, Result};
use crate::seed::{self, purpose};

pub const FOREST_MAGIC: &str = "RPNET-FOREST v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until purity or the leaf-size limit.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 11,
            max_depth: None,
            min_samples_leaf: 2,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Fraction of positive training samples reaching the leaf.
    Leaf(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    /// Preorder; the root is node 0.
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn leaf_value(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn votes_positive(&self, x: &[f64]) -> bool {
        self.leaf_value(x) > 0.5
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub n_features: usize,
    pub config: ForestConfig,
    pub normalizer: Normalizer,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a, R: Rng> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    config: &'a ForestConfig,
    mtry: usize,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl<R: Rng> Builder<'_, R> {
    fn best_split_on(&self, rows: &[usize], feature: usize) -> Option<BestSplit> {
        let mut sorted: Vec<(f64, bool)> = rows
            .iter()
            .map(|&r| (self.x[r][feature], self.y[r]))
            .collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = sorted.len();
        let total_pos = sorted.iter().filter(|s| s.1).count();
        let min_leaf = self.config.min_samples_leaf.max(1);
        let mut left_pos = 0;
        let mut best: Option<BestSplit> = None;
        for i in 0..n - 1 {
            if sorted[i].1 {
                left_pos += 1;
            }
            if sorted[i].0 == sorted[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let impurity = (nl as f64 * gini(left_pos, nl)
                + nr as f64 * gini(total_pos - left_pos, nr))
                / n as f64;
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                best = Some(BestSplit {
                    feature,
                    threshold: sorted[i].0,
                    impurity,
                });
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let pos = rows.iter().filter(|&&r| self.y[r]).count();
        let value = pos as f64 / rows.len() as f64;
        self.nodes.push(Node::Leaf(value));
        let pure = pos == 0 || pos == rows.len();
        let depth_ok = self.config.max_depth.is_none_or(|d| depth < d);
        if pure || !depth_ok || rows.len() < 2 * self.config.min_samples_leaf.max(1) {
            return id;
        }
        let mut features: Vec<usize> = (0..self.x[0].len()).collect();
        features.shuffle(self.rng);
        let mut best: Option<BestSplit> = None;
        for (k, &f) in features.iter().enumerate() {
            if k >= self.mtry && best.is_some() {
                break;
            }
            if let Some(s) = self.best_split_on(&rows, f) {
                if best.as_ref().is_none_or(|b| s.impurity < b.impurity) {
                    best = Some(s);
                }
            }
        }
        let Some(split) = best else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.x[i][split.feature] <= split.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

/// Fits a forest on explicit feature rows.
pub fn train_forest_on_features(
    x: &[Vec<f64>],
    y: &[bool],
    config: &ForestConfig,
    normalizer: &Normalizer,
) -> Result<RandomForest> {
    if config.n_trees == 0 {
        return Err(Error::InvalidArgument("n_trees must be at least 1".into()));
    }
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::shape("forest rows", x.len(), y.len()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("forest features", d, "ragged rows"));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::InvalidArgument(
            "random forest needs both classes".into(),
        ));
    }
    let mtry = ((d as f64).sqrt().floor() as usize).max(1);
    let n = x.len();
    let mut trees = Vec::with_capacity(config.n_trees);
    for t in 0..config.n_trees {
        let mut rng = seed::derived_rng(config.seed, &[purpose::BOOTSTRAP, t as u64]);
        let rows: Vec<usize> = if config.bootstrap {
            (0..n).map(|_| rng.gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut b = Builder {
            x,
            y,
            config,
            mtry,
            rng: &mut rng,
            nodes: Vec::new(),
        };
        b.grow(rows, 0);
        trees.push(DecisionTree { nodes: b.nodes });
    }
    Ok(RandomForest {
        trees,
        n_features: d,
        config: config.clone(),
        normalizer: normalizer.clone(),
    })
}

pub fn train_rf(
    windows: &[&ObservationWindow],
    config: &ForestConfig,
    normalizer: &Normalizer,
) -> Result<RandomForest> {
    let x: Vec<Vec<f64>> = windows.iter().map(|w| w.time_mean()).collect();
    let y: Vec<bool> = windows.iter().map(|w| w.label).collect();
    train_forest_on_features(&x, &y, config, normalizer)
}

impl RandomForest {
    /// Fraction of trees voting positive.
    pub fn predict_features(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::shape("forest input", self.n_features, x.len()));
        }
        let votes = self.trees.iter().filter(|t| t.votes_positive(x)).count();
        Ok(votes as f64 / self.trees.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FOREST_MAGIC}");
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let _ = writeln!(out, "# family rf");
        let _ = writeln!(out, "# config {config}");
        let _ = writeln!(out, "# seed {}", self.config.seed);
        let _ = writeln!(out, "# normalizer_digest {}", self.normalizer.digest());
        let _ = writeln!(out, "# normalizer_fitted_on {}", self.normalizer.fitted_on);
        let _ = writeln!(out, "# n_features {}", self.n_features);
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.16e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "normalizer.min {}", fmt(&self.normalizer.min));
        let _ = writeln!(out, "normalizer.max {}", fmt(&self.normalizer.max));
        for (i, t) in self.trees.iter().enumerate() {
            let _ = writeln!(out, "tree {i} {}", t.nodes.len());
            for node in &t.nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let _ = writeln!(out, "{feature},{threshold:.16e},{left},{right},");
                    }
                    Node::Leaf(v) => {
                        let _ = writeln!(out, "-1,,,,{v:.16e}");
                    }
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(FOREST_MAGIC) {
            return Err(bad(format!("expected '{FOREST_MAGIC}'")));
        }
        let mut config: Option<ForestConfig> = None;
        let mut n_features = 0;
        let mut digest = String::new();
        let mut fitted_on = String::new();
        let mut min = Vec::new();
        let mut max = Vec::new();
        let mut trees: Vec<DecisionTree> = Vec::new();
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number '{s}'")))
        };
        let parse_u = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad index '{s}'")))
        };
        for line in lines {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                match k {
                    "config" => {
                        config = Some(
                            serde_json::from_str(v).map_err(|e| bad(format!("bad config: {e}")))?,
                        )
                    }
                    "n_features" => n_features = parse_u(v)?,
                    "normalizer_digest" => digest = v.to_string(),
                    "normalizer_fitted_on" => fitted_on = v.to_string(),
                    _ => {}
                }
            } else if let Some(rest) = line.strip_prefix("normalizer.min") {
                min = rest
                    .split_whitespace()
                    .map(parse_f)
                    .collect::<Result<_>>()?;
            } else if let Some(rest) = line.strip_prefix("normalizer.max") {
                max = rest
                    .split_whitespace()
                    .map(parse_f)
                    .collect::<Result<_>>()?;
            } else if line.starts_with("tree ") {
                trees.push(DecisionTree { nodes: Vec::new() });
            } else {
                let tree = trees
                    .last_mut()
                    .ok_or_else(|| bad("node before tree".into()))?;
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(format!("bad node '{line}'")));
                }
                let node = if f[0] == "-1" {
                    Node::Leaf(parse_f(f[4])?)
                } else {
                    Node::Split {
                        feature: parse_u(f[0])?,
                        threshold: parse_f(f[1])?,
                        left: parse_u(f[2])?,
                        right: parse_u(f[3])?,
                    }
                };
                tree.nodes.push(node);
            }
        }
        let config = config.ok_or_else(|| bad("missing config header".into()))?;
        let normalizer = Normalizer {
            min,
            max,
            fitted_on,
        };
        if normalizer.digest() != digest {
            return Err(bad("normalizer digest mismatch".into()));
        }
        for t in &trees {
            let n = t.nodes.len();
            let ok = n > 0
                && t.nodes.iter().all(|node| match node {
                    Node::Split {
                        feature,
                        left,
                        right,
                        ..
                    } => *feature < n_features && *left < n && *right < n,
                    Node::Leaf(_) => true,
                });
            if !ok {
                return Err(bad("malformed tree".into()));
            }
        }
        Ok(RandomForest {
            trees,
            n_features,
            config,
            normalizer,
        })
    }
}

pub fn rf_predict(forest: &RandomForest, window: &ObservationWindow) -> Result<f64> {
    forest.predict_features(&window.time_mean())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(d: usize) -> Normalizer {
        Normalizer {
            min: vec![0.0; d],
            max: vec![1.0; d],
            fitted_on: String::new(),
        }
    }

    #[test]
    fn perfect_feature_gives_perfect_training_accuracy() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let f = train_forest_on_features(&x, &y, &ForestConfig::default(), &norm(1)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(f.predict_features(xi).unwrap() > 0.5, *yi);
        }
    }

    #[test]
    fn hand_built_single_tree() {
        // Gini ties between thresholds 1 and 3 resolve to the first scanned.
        let x = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let y = vec![false, true, false, true];
        let cfg = ForestConfig {
            n_trees: 1,
            bootstrap: false,
            min_samples_leaf: 1,
            ..Default::default()
        };
        let f = train_forest_on_features(&x, &y, &cfg, &norm(1)).unwrap();
        let split = |threshold: f64, left, right| Node::Split {
            feature: 0,
            threshold,
            left,
            right,
        };
        assert_eq!(
            f.trees[0].nodes,
            vec![
                split(1.0, 1, 2),
                Node::Leaf(0.0),
                split(2.0, 3, 4),
                Node::Leaf(1.0),
                split(3.0, 5, 6),
                Node::Leaf(0.0),
                Node::Leaf(1.0),
            ]
        );
        assert_eq!(f.trees[0].depth(), 3);
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(
            train_forest_on_features(&x, &[true, true], &ForestConfig::default(), &norm(1))
                .is_err()
        );
        let cfg = ForestConfig {
            n_trees: 0,
            ..Default::default()
        };
        assert!(train_forest_on_features(&x, &[true, false], &cfg, &norm(1)).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i % 7) as f64, (i * 3 % 11) as f64, i as f64 * 0.1])
            .collect();
        let y: Vec<bool> = (0..30).map(|i| (i * 5) % 3 == 0).collect();
        let f = train_forest_on_features(&x, &y, &ForestConfig::default(), &norm(3)).unwrap();
        let back = RandomForest::from_text(&f.to_text()).unwrap();
        assert_eq!(back, f);
        for xi in &x {
            assert_eq!(
                f.predict_features(xi).unwrap(),
                back.predict_features(xi).unwrap()
            );
        }
    }
}
