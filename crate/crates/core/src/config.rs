//! Run configuration: sectioned `key = value` files (TOML) with dotted
//! `section.key=value` overrides applied before validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::model::HeadKind;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Stocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binarization {
    /// Fresh Bernoulli draws every epoch.
    Dynamic,
    /// One fixed draw for the whole run.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DatasetKind,
    /// MNIST directory or stocks file.
    pub path: PathBuf,
    /// Number of labeled training examples; exclusive with `label_fraction`.
    #[serde(default)]
    pub labeled: Option<usize>,
    /// Labeled share of the training portion; exclusive with `labeled`.
    #[serde(default)]
    pub label_fraction: Option<f64>,
    /// Cap on the number of unlabeled training examples (0 = none used).
    #[serde(default)]
    pub unlabeled_limit: Option<usize>,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default = "default_binarize")]
    pub binarize: Binarization,
    /// Seed of the train/validation (MNIST) or train/test (stocks) partition.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub validation_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Stocks: `last`, `first` or a zero-based column index.
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_n_splits")]
    pub n_splits: usize,
    /// Stocks: share of the training portion held out for model selection.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_binarize() -> Binarization {
    Binarization::Dynamic
}
fn default_label_column() -> String {
    "last".into()
}
fn default_train_size() -> usize {
    600
}
fn default_test_size() -> usize {
    350
}
fn default_n_splits() -> usize {
    10
}
fn default_validation_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub recognition_hidden: Vec<usize>,
    pub generative_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub activation: Activation,
    pub head: HeadKind,
    /// Gaussian output only: one learned variance vector instead of a variance head.
    #[serde(default = "yes")]
    pub global_variance: bool,
    #[serde(default)]
    pub learn_class_prior: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    /// Weight of the classifier term; required, there is no default.
    pub alpha: f64,
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Evaluations without validation improvement before stopping; 0 disables.
    #[serde(default)]
    pub early_stop_patience: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "lr")]
    pub lr: f64,
    #[serde(default = "b1")]
    pub beta1: f64,
    #[serde(default = "b2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
    /// Elementwise gradient clip; 0 disables.
    #[serde(default)]
    pub clip: f64,
}

fn lr() -> f64 {
    3e-4
}
fn b1() -> f64 {
    0.9
}
fn b2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: lr(),
            beta1: b1(),
            beta2: b2(),
            eps: eps(),
            clip: 0.0,
        }
    }
}

impl OptimSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip: (self.clip > 0.0).then_some(self.clip),
        }
    }
}

/// Label-budget × head grid for the `replicate` verb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateSection {
    #[serde(default = "one")]
    pub n_runs: usize,
    /// Label fractions to sweep; empty means the `data` budget only.
    #[serde(default)]
    pub fractions: Vec<f64>,
    /// Heads to sweep; empty means the `model` head only.
    #[serde(default)]
    pub heads: Vec<HeadKind>,
}

impl Default for ReplicateSection {
    fn default() -> Self {
        ReplicateSection {
            n_runs: 1,
            fractions: Vec::new(),
            heads: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub replicate: ReplicateSection,
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `section.key` in a parsed document; values are read as TOML
/// literals, falling back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl TrainConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: TrainConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let t = &self.train;
        if t.batch_size_labeled == 0 || t.batch_size_unlabeled == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(t.alpha >= 0.0 && t.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if t.epochs == 0 || t.eval_every == 0 {
            return bad("epochs and eval_every must be at least 1");
        }
        let d = &self.data;
        if d.labeled.is_some() && d.label_fraction.is_some() {
            return bad("set at most one of data.labeled and data.label_fraction");
        }
        if let Some(f) = d.label_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad("data.label_fraction must be in (0, 1]");
            }
        }
        if !(0.0..1.0).contains(&d.validation_fraction) {
            return bad("data.validation_fraction must be in [0, 1)");
        }
        if crate::data::LabelColumn::parse(&d.label_column).is_none() {
            return bad("data.label_column must be `last`, `first` or an index");
        }
        if self.model.latent_dim == 0 {
            return bad("model.latent_dim must be positive");
        }
        if self.replicate.n_runs == 0 {
            return bad("replicate.n_runs must be at least 1");
        }
        if self.replicate.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("replicate.fractions must lie in (0, 1]");
        }
        self.optim.adam().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const TOY: &str = r#"
[run]
seed = 7

[data]
kind = "stocks"
path = "x.csv"
label_fraction = 0.3

[model]
latent_dim = 1
recognition_hidden = [7]
generative_hidden = [7]
classifier_hidden = [7]
activation = "tanh"
head = "ordmax"

[train]
epochs = 5
batch_size_labeled = 600
batch_size_unlabeled = 64
alpha = 10.0
"#;

    #[test]
    fn parses_with_defaults() {
        let c = TrainConfig::from_toml_str(TOY, &[]).unwrap();
        assert_eq!(c.run.seed, 7);
        assert_eq!(c.optim, OptimSection::default());
        assert_eq!(c.data.binarize, Binarization::Dynamic);
        assert_eq!(c.train.early_stop_patience, 0);
        assert_eq!(c.model.head, HeadKind::Ordmax);
        assert!(c.model.global_variance);
        let back = TrainConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_take_precedence() {
        let o = [
            "train.alpha=100".to_string(),
            "model.head = softmax".to_string(),
            "model.recognition_hidden=[3, 4]".to_string(),
            "optim.lr=0.01".to_string(),
        ];
        let c = TrainConfig::from_toml_str(TOY, &o).unwrap();
        assert_eq!(c.train.alpha, 100.0);
        assert_eq!(c.model.head, HeadKind::Softmax);
        assert_eq!(c.model.recognition_hidden, vec![3, 4]);
        assert_eq!(c.optim.lr, 0.01);
    }

    #[test]
    fn alpha_is_required_and_errors_are_config_errors() {
        let no_alpha = TOY.replace("alpha = 10.0", "");
        let err = TrainConfig::from_toml_str(&no_alpha, &[]).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        assert_eq!(err.kind(), crate::error::ErrorKind::Config);
        for o in ["train.alpha=-1", "train.batch_size_labeled=0", "data.labeled=5", "nonsense", "train.bogus=1"] {
            assert!(TrainConfig::from_toml_str(TOY, &[o.to_string()]).is_err(), "{o}");
        }
        let err = TrainConfig::load(Path::new("/no/such/cfg.toml"), &[]).unwrap_err();
        assert!(err.to_string().contains("/no/such/cfg.toml"));
    }
}
