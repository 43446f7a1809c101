//! INI run configuration with command-line overrides.
//!
//! A file is read into `section -> key -> value`, flags are written on top
//! of it, and [`Settings::resolve`] turns the result into a typed
//! [`RunConfig`]. Unknown sections or keys are usage errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use serde::Serialize;

use relapse_core::data::{Modality, ModalitySelection, WindowConfig};
use relapse_core::eval::{ExperimentConfig, ModelConfig, PersonalizationMode};
use relapse_core::models::{
    AutoencoderConfig, ForestConfig, ModelFamily, RelapsePredNetConfig, WindowAggregation,
};
use relapse_core::nn::LossKind;
use relapse_core::personalization::{PersonalizationMetric, Stratum};
use relapse_core::synth::CohortSpec;

use crate::UsageError;

pub const SECTIONS: [&str; 7] = [
    "data",
    "synthetic",
    "window",
    "model",
    "personalization",
    "evaluation",
    "output",
];

const RPNET_KEYS: [&str; 11] = [
    "loss",
    "hidden_dim",
    "fc1",
    "fc2",
    "dropout",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "min_improvement",
    "threshold",
];
const AUTOENC_KEYS: [&str; 5] = [
    "encoder_sizes",
    "learning_rate",
    "epochs",
    "batch_size",
    "aggregation",
];
const RF_KEYS: [&str; 4] = ["n_trees", "max_depth", "min_samples_leaf", "bootstrap"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, BTreeMap<String, String>>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl Settings {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| usage(format!("config: {e}")))?;
        let mut s = Settings::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if props.iter().next().is_some() {
                    return Err(usage("config: keys must appear under a [section]"));
                }
                continue;
            };
            for (k, v) in props.iter() {
                s.set(section, k, v)?;
            }
        }
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_ini_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) -> Result<()> {
        let section = section.trim();
        if !SECTIONS.contains(&section) {
            return Err(usage(format!("unknown config section [{section}]")));
        }
        self.values
            .entry(section.to_string())
            .or_default()
            .insert(key.trim().to_string(), value.into().trim().to_string());
        Ok(())
    }

    /// Parses `section.key=value`.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| usage(format!("expected section.key=value, got '{assignment}'")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| usage(format!("expected section.key=value, got '{assignment}'")))?;
        self.set(section, key, value)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(section)?.get(key).map(String::as_str)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut r = Reader {
            settings: self,
            used: Default::default(),
        };
        let config = r.run_config()?;
        for (section, keys) in &self.values {
            for key in keys.keys() {
                if !r.used.contains(&(section.clone(), key.clone())) {
                    return Err(usage(format!(
                        "unknown or inapplicable config key {section}.{key}"
                    )));
                }
            }
        }
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(CohortSpec),
    Csv {
        patients: PathBuf,
        sensing: PathBuf,
        relapses: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelapseTestSet {
    pub fraction: f64,
    pub seed: u64,
}

/// Everything a run needs, with defaults expanded. Serializes as the config
/// echo embedded in reports. Worker count and output location are omitted.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub experiment: ExperimentConfig,
    pub relapse_test_set: Option<RelapseTestSet>,
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

struct Reader<'a> {
    settings: &'a Settings,
    used: std::collections::BTreeSet<(String, String)>,
}

impl Reader<'_> {
    fn raw(&mut self, section: &str, key: &str) -> Option<String> {
        let v = self.settings.get(section, key)?.to_string();
        self.used.insert((section.to_string(), key.to_string()));
        Some(v)
    }

    fn parse<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("{section}.{key} = '{v}': {e}"))),
        }
    }

    fn or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(section, key)?.unwrap_or(default))
    }

    fn run_config(&mut self) -> Result<RunConfig> {
        let data = self.data_source()?;
        let window = self.window()?;
        let model = self.model()?;
        let personalization = self.personalization()?;
        let modalities = match self.raw("evaluation", "modalities") {
            None => ModalitySelection::all(),
            Some(v) => parse_modalities(&v)?,
        };
        let seeds = match self.raw("evaluation", "seeds") {
            None => (0..10).collect(),
            Some(v) => parse_seeds(&v)?,
        };
        let test_patients = self.raw("evaluation", "test_patients").map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
        });
        let rts_enabled = self.or("evaluation", "relapse_test_set", false)?;
        let fraction = self.or("evaluation", "relapse_test_fraction", 0.2)?;
        let rts_seed = self.or("evaluation", "relapse_test_seed", 0u64)?;
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(usage("evaluation.relapse_test_fraction must lie in (0, 1]"));
        }
        let output = self.raw("output", "dir").map(PathBuf::from);
        let experiment = ExperimentConfig {
            window,
            modalities,
            model,
            personalization,
            seeds,
            test_patients,
        };
        Ok(RunConfig {
            data,
            experiment,
            relapse_test_set: rts_enabled.then_some(RelapseTestSet {
                fraction,
                seed: rts_seed,
            }),
            output,
        })
    }

    fn data_source(&mut self) -> Result<DataSource> {
        let source = self.raw("data", "source");
        let dir = self.raw("data", "dir").map(PathBuf::from);
        let mut paths = Vec::new();
        for name in ["patients", "sensing", "relapses"] {
            let p = self
                .raw("data", name)
                .map(PathBuf::from)
                .or_else(|| dir.as_ref().map(|d| d.join(format!("{name}.csv"))));
            paths.push(p);
        }
        let any_path = paths.iter().any(Option::is_some);
        let source = match source.as_deref() {
            Some("synthetic") => "synthetic",
            Some("csv") => "csv",
            None if any_path => "csv",
            None => "synthetic",
            Some(other) => {
                return Err(usage(format!(
                    "data.source must be synthetic or csv, got '{other}'"
                )))
            }
        };
        if source == "synthetic" {
            if any_path {
                return Err(usage(
                    "exactly one data source: CSV paths given with a synthetic source",
                ));
            }
            return Ok(DataSource::Synthetic(self.synthetic()?));
        }
        if self.settings.values.contains_key("synthetic") {
            return Err(usage(
                "exactly one data source: [synthetic] given with CSV input",
            ));
        }
        match (paths[0].take(), paths[1].take(), paths[2].take()) {
            (Some(patients), Some(sensing), Some(relapses)) => Ok(DataSource::Csv {
                patients,
                sensing,
                relapses,
            }),
            _ => Err(usage(
                "CSV input needs patients, sensing and relapses paths",
            )),
        }
    }

    pub(crate) fn synthetic(&mut self) -> Result<CohortSpec> {
        let d = CohortSpec::default();
        let spec = CohortSpec {
            n_patients: self.or("synthetic", "n_patients", d.n_patients)?,
            days_per_patient: self.or("synthetic", "days_per_patient", d.days_per_patient)?,
            relapse_fraction: self.or("synthetic", "relapse_fraction", d.relapse_fraction)?,
            prodrome_days: self.or("synthetic", "prodrome_days", d.prodrome_days)?,
            trait_effect: self.or("synthetic", "trait_effect", d.trait_effect)?,
            drift_effect: self.or("synthetic", "drift_effect", d.drift_effect)?,
            missing_rate: self.or("synthetic", "missing_rate", d.missing_rate)?,
            seed: self.or("synthetic", "seed", d.seed)?,
        };
        spec.validate().map_err(|e| usage(e.to_string()))?;
        Ok(spec)
    }

    fn window(&mut self) -> Result<WindowConfig> {
        let d = WindowConfig::default();
        let w = WindowConfig {
            days: self.or("window", "days", d.days)?,
            step: self.or("window", "step", d.step)?,
            horizon: self.or("window", "horizon", d.horizon)?,
            missing_day_fraction_limit: self.or(
                "window",
                "missing_day_fraction_limit",
                d.missing_day_fraction_limit,
            )?,
            post_relapse_exclusion: self.or(
                "window",
                "post_relapse_exclusion",
                d.post_relapse_exclusion,
            )?,
        };
        w.validate().map_err(|e| usage(e.to_string()))?;
        Ok(w)
    }

    fn model(&mut self) -> Result<ModelConfig> {
        let family: ModelFamily = self.or("model", "family", ModelFamily::Rpnet)?;
        let allowed: &[&str] = match family {
            ModelFamily::Rpnet => &RPNET_KEYS,
            ModelFamily::Autoenc => &AUTOENC_KEYS,
            ModelFamily::Rf => &RF_KEYS,
        };
        if let Some(keys) = self.settings.values.get("model") {
            for k in keys.keys().filter(|k| k.as_str() != "family") {
                if !allowed.contains(&k.as_str()) {
                    return Err(usage(format!(
                        "model.{k} does not apply to model family {family}"
                    )));
                }
            }
        }
        Ok(match family {
            ModelFamily::Rpnet => {
                let d = RelapsePredNetConfig::default();
                let c = RelapsePredNetConfig {
                    hidden_dim: self.or("model", "hidden_dim", d.hidden_dim)?,
                    fc1: self.or("model", "fc1", d.fc1)?,
                    fc2: self.or("model", "fc2", d.fc2)?,
                    dropout: self.or("model", "dropout", d.dropout)?,
                    loss: self.or("model", "loss", d.loss)?,
                    learning_rate: self.or("model", "learning_rate", d.learning_rate)?,
                    batch_size: self.or("model", "batch_size", d.batch_size)?,
                    max_epochs: self.or("model", "max_epochs", d.max_epochs)?,
                    patience: self.or("model", "patience", d.patience)?,
                    min_improvement: self.or("model", "min_improvement", d.min_improvement)?,
                    threshold: self.or("model", "threshold", d.threshold)?,
                    seed: d.seed,
                };
                c.validate().map_err(|e| usage(e.to_string()))?;
                ModelConfig::Rpnet(c)
            }
            ModelFamily::Autoenc => {
                let d = AutoencoderConfig::default();
                let encoder_sizes = match self.raw("model", "encoder_sizes") {
                    None => d.encoder_sizes,
                    Some(v) => v
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| usage(format!("model.encoder_sizes: {e}")))?,
                };
                if encoder_sizes.is_empty() || encoder_sizes.contains(&0) {
                    return Err(usage("model.encoder_sizes must be positive widths"));
                }
                ModelConfig::Autoenc(AutoencoderConfig {
                    encoder_sizes,
                    learning_rate: self.or("model", "learning_rate", d.learning_rate)?,
                    epochs: self.or("model", "epochs", d.epochs)?,
                    batch_size: self.or("model", "batch_size", d.batch_size)?,
                    aggregation: self.or::<WindowAggregation>(
                        "model",
                        "aggregation",
                        d.aggregation,
                    )?,
                    seed: d.seed,
                })
            }
            ModelFamily::Rf => {
                let d = ForestConfig::default();
                let max_depth = match self.raw("model", "max_depth") {
                    None => d.max_depth,
                    Some(v) if v == "none" => None,
                    Some(v) => Some(
                        v.parse()
                            .map_err(|e| usage(format!("model.max_depth: {e}")))?,
                    ),
                };
                let c = ForestConfig {
                    n_trees: self.or("model", "n_trees", d.n_trees)?,
                    max_depth,
                    min_samples_leaf: self.or("model", "min_samples_leaf", d.min_samples_leaf)?,
                    bootstrap: self.or("model", "bootstrap", d.bootstrap)?,
                    seed: d.seed,
                };
                if c.n_trees == 0 || c.min_samples_leaf == 0 {
                    return Err(usage(
                        "model.n_trees and model.min_samples_leaf must be positive",
                    ));
                }
                ModelConfig::Rf(c)
            }
        })
    }

    fn personalization(&mut self) -> Result<PersonalizationMode> {
        let mode = self
            .raw("personalization", "mode")
            .unwrap_or_else(|| "metric".into());
        let metric: PersonalizationMetric =
            self.or("personalization", "metric", PersonalizationMetric::Sfs)?;
        let stratum = self.raw("personalization", "stratum");
        let has_metric = self.settings.get("personalization", "metric").is_some();
        Ok(match mode.as_str() {
            "metric" if stratum.is_none() => PersonalizationMode::Metric { metric },
            "metric" | "stratified" => {
                let stratum = parse_stratum(stratum.as_deref().unwrap_or("closest"))?;
                PersonalizationMode::Stratified { metric, stratum }
            }
            "random" | "none" => {
                if has_metric || stratum.is_some() {
                    return Err(usage(format!(
                        "personalization mode '{mode}' takes no metric or stratum"
                    )));
                }
                if mode == "random" {
                    PersonalizationMode::Random
                } else {
                    PersonalizationMode::None
                }
            }
            other => {
                return Err(usage(format!(
                    "personalization.mode must be metric, stratified, random or none, got '{other}'"
                )))
            }
        })
    }
}

pub fn parse_stratum(s: &str) -> Result<Stratum> {
    Stratum::ALL
        .iter()
        .copied()
        .find(|x| x.name() == s)
        .ok_or_else(|| {
            usage(format!(
                "unknown stratum '{s}' (closest, first_quartile, median)"
            ))
        })
}

pub fn parse_modalities(s: &str) -> Result<ModalitySelection> {
    let mods = s
        .split(',')
        .map(|m| Modality::from_str(m.trim()))
        .collect::<relapse_core::Result<Vec<_>>>()
        .map_err(|e| usage(e.to_string()))?;
    ModalitySelection::new(mods).map_err(|e| usage(e.to_string()))
}

/// `a..b` (half-open), a comma list, or a single seed.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = |e: std::num::ParseIntError| usage(format!("seeds '{s}': {e}"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(bad)?,
            b.trim().parse().map_err(bad)?,
        );
        (a..b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(bad))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(usage(format!("seeds '{s}' selects no seed")));
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(usage(format!("seeds '{s}' repeats a seed")));
    }
    Ok(seeds)
}

/// Resolves only the `[synthetic]` section, for `synth`.
pub fn synthetic_spec(settings: &Settings) -> Result<CohortSpec> {
    let mut r = Reader {
        settings,
        used: Default::default(),
    };
    let spec = r.synthetic()?;
    if let Some(keys) = settings.values.get("synthetic") {
        for k in keys.keys() {
            if !r.used.contains(&("synthetic".to_string(), k.clone())) {
                return Err(usage(format!("unknown config key synthetic.{k}")));
            }
        }
    }
    Ok(spec)
}

pub fn loss_flag(s: &str) -> Result<LossKind> {
    match s {
        "bce" | "f2" => Ok(s.parse().expect("known loss")),
        other => Err(usage(format!("--loss must be bce or f2, got '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str) -> Result<RunConfig> {
        Settings::from_ini_str(text)?.resolve()
    }

    fn is_usage(e: &anyhow::Error) -> bool {
        e.downcast_ref::<UsageError>().is_some()
    }

    #[test]
    fn empty_config_expands_defaults() {
        let c = resolve("").unwrap();
        assert_eq!(c.data, DataSource::Synthetic(CohortSpec::default()));
        assert_eq!(c.experiment, ExperimentConfig::default());
        assert!(c.relapse_test_set.is_none());
    }

    #[test]
    fn sections_and_keys_are_read() {
        let c = resolve(
            "[model]\nfamily = rf\nn_trees = 5\n[personalization]\nmode = random\n\
             [evaluation]\nseeds = 3..5\nmodalities = conversation\nrelapse_test_set = true\n",
        )
        .unwrap();
        assert_eq!(c.experiment.seeds, vec![3, 4]);
        assert_eq!(c.experiment.modalities.dim(), 24);
        assert_eq!(c.experiment.personalization, PersonalizationMode::Random);
        match c.experiment.model {
            ModelConfig::Rf(f) => assert_eq!(f.n_trees, 5),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.relapse_test_set.unwrap().fraction, 0.2);
    }

    #[test]
    fn unknown_and_inapplicable_keys_are_usage_errors() {
        for text in [
            "[bogus]\na = 1\n",
            "[window]\nwidth = 3\n",
            "[model]\nfamily = rf\nloss = f2\n",
            "[personalization]\nmode = none\nmetric = sfs\n",
            "[data]\nsource = synthetic\npatients = p.csv\n",
            "[data]\npatients = p.csv\n",
            "[evaluation]\nseeds = 1,1\n",
            "[evaluation]\nmodalities = smell\n",
            "orphan = 1\n",
        ] {
            let e = resolve(text).unwrap_err();
            assert!(is_usage(&e), "{text}: {e}");
        }
    }

    #[test]
    fn assignments_override_file_values() {
        let mut s = Settings::from_ini_str("[model]\nhidden_dim = 4\n").unwrap();
        s.set_assignment("model.hidden_dim=6").unwrap();
        match s.resolve().unwrap().experiment.model {
            ModelConfig::Rpnet(c) => assert_eq!(c.hidden_dim, 6),
            other => panic!("{other:?}"),
        }
        assert!(s.set_assignment("hidden_dim=6").is_err());
    }

    #[test]
    fn data_dir_expands_to_three_files() {
        let c = resolve("[data]\ndir = in\n").unwrap();
        assert_eq!(
            c.data,
            DataSource::Csv {
                patients: "in/patients.csv".into(),
                sensing: "in/sensing.csv".into(),
                relapses: "in/relapses.csv".into(),
            }
        );
    }

    #[test]
    fn seed_forms() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("7, 2").unwrap(), vec![7, 2]);
        assert_eq!(parse_seeds("4").unwrap(), vec![4]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
