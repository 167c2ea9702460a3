//! Flat `key = value` run configuration.
//!
//! Files are UTF-8, one assignment per line, `#` starts a comment. Every key
//! has a default; unknown keys are rejected. Command-line flags are applied
//! on top of the file.

use std::fmt::Write as _;
use std::str::FromStr;

use conststyle_core::datagen::FamilyParams;
use conststyle_core::net::TrainMode;
use conststyle_core::pipeline::TrainConfig;
use conststyle_core::unified::UnifiedMethod;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse {value:?}: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |msg: &str| ConfigError::Syntax { line: i + 1, msg: msg.into() };
        if line.starts_with('[') {
            return Err(syntax("sections are not supported"));
        }
        let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(syntax("empty key"));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(syntax(&format!("duplicate key `{k}`")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub domains: usize,
    pub classes: usize,
    pub per_cell: usize,
    pub side: usize,
    pub shift_levels: Vec<f64>,
    pub family: FamilyParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            classes: 4,
            per_cell: 50,
            side: 16,
            shift_levels: vec![0.0, 1.0, 2.0, 3.0],
            family: FamilyParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub holdout: Option<usize>,
    pub base_domain: usize,
    pub alphas: Vec<f64>,
    pub cluster_counts: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            holdout: None,
            base_domain: 0,
            alphas: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
            cluster_counts: vec![1, 2, 3, 4, 5],
            sizes: vec![200, 400, 600, 800],
        }
    }
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: value.into(), msg: e.to_string() })
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| scalar(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let d = &mut self.data;
        let t = &mut self.train;
        let f = &mut d.family;
        match key {
            "domains" => d.domains = scalar(key, value)?,
            "classes" => d.classes = scalar(key, value)?,
            "per_cell" => d.per_cell = scalar(key, value)?,
            "side" => d.side = scalar(key, value)?,
            "shift_levels" => d.shift_levels = list(key, value)?,
            "log_gain_min" => f.log_gain.0 = scalar(key, value)?,
            "log_gain_max" => f.log_gain.1 = scalar(key, value)?,
            "bias_min" => f.bias.0 = scalar(key, value)?,
            "bias_max" => f.bias.1 = scalar(key, value)?,
            "angle_min" => f.angle.0 = scalar(key, value)?,
            "angle_max" => f.angle.1 = scalar(key, value)?,
            "noise_per_level" => f.noise = scalar(key, value)?,
            "shared_direction" => f.shared_direction = scalar(key, value)?,
            "epochs" => t.epochs = scalar(key, value)?,
            "initial_epochs" => t.initial_epochs = scalar(key, value)?,
            "update_interval" => t.update_interval = scalar(key, value)?,
            "learning_rate" => t.learning_rate = scalar(key, value)?,
            "momentum" => t.momentum = scalar(key, value)?,
            "n_clusters" => t.n_clusters = scalar(key, value)?,
            "alpha" => t.alpha = scalar(key, value)?,
            "batch_size" => t.batch_size = scalar(key, value)?,
            "seed" => t.seed = scalar(key, value)?,
            "unified_method" => t.unified_method = scalar::<UnifiedMethod>(key, value)?,
            "mode" => t.mode = scalar::<TrainMode>(key, value)?,
            "freeze_initial_style" => t.freeze_initial_style = scalar(key, value)?,
            "cluster_max_iterations" => t.cluster_max_iterations = scalar(key, value)?,
            "cluster_tol" => t.cluster_tol = scalar(key, value)?,
            "covariance_floor" => t.covariance_floor = scalar(key, value)?,
            "holdout" => {
                self.holdout = match value {
                    "none" => None,
                    v => Some(scalar(key, v)?),
                }
            }
            "base_domain" => self.base_domain = scalar(key, value)?,
            "alphas" => self.alphas = list(key, value)?,
            "cluster_counts" => self.cluster_counts = list(key, value)?,
            "sizes" => self.sizes = list(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let f = &d.family;
        vec![
            ("domains", d.domains.to_string()),
            ("classes", d.classes.to_string()),
            ("per_cell", d.per_cell.to_string()),
            ("side", d.side.to_string()),
            ("shift_levels", join(&d.shift_levels)),
            ("log_gain_min", f.log_gain.0.to_string()),
            ("log_gain_max", f.log_gain.1.to_string()),
            ("bias_min", f.bias.0.to_string()),
            ("bias_max", f.bias.1.to_string()),
            ("angle_min", f.angle.0.to_string()),
            ("angle_max", f.angle.1.to_string()),
            ("noise_per_level", f.noise.to_string()),
            ("shared_direction", f.shared_direction.to_string()),
            ("epochs", t.epochs.to_string()),
            ("initial_epochs", t.initial_epochs.to_string()),
            ("update_interval", t.update_interval.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("momentum", t.momentum.to_string()),
            ("n_clusters", t.n_clusters.to_string()),
            ("alpha", t.alpha.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("unified_method", t.unified_method.as_str().to_string()),
            ("mode", t.mode.as_str().to_string()),
            ("freeze_initial_style", t.freeze_initial_style.to_string()),
            ("cluster_max_iterations", t.cluster_max_iterations.to_string()),
            ("cluster_tol", t.cluster_tol.to_string()),
            ("covariance_floor", t.covariance_floor.to_string()),
            ("holdout", self.holdout.map_or("none".to_string(), |h| h.to_string())),
            ("base_domain", self.base_domain.to_string()),
            ("alphas", join(&self.alphas)),
            ("cluster_counts", join(&self.cluster_counts)),
            ("sizes", join(&self.sizes)),
        ]
    }

    /// Renders the configuration as a loadable file, preceded by `header`
    /// comment lines.
    pub fn to_text(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            let _ = writeln!(out, "# {h}");
        }
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.data.shift_levels.len() != self.data.domains {
            return invalid(format!(
                "{} shift levels for {} domains",
                self.data.shift_levels.len(),
                self.data.domains
            ));
        }
        self.data.family.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return invalid("alphas must lie in [0, 1]".into());
        }
        if self.cluster_counts.contains(&0) {
            return invalid("cluster counts must be positive".into());
        }
        Ok(())
    }
}
