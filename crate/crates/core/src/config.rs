//! Run configuration.
//!
//! Settings are flat `key=value` strings. The CLI layers them: values from a
//! config file are overridden by command-line flags, and anything still unset
//! falls back to the defaults below. Config files hold one `key = value` per
//! line; blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::eval::{ProtocolKind, ProtocolSpec, DEFAULT_CUTOFFS, DEFAULT_TRIALS};
use crate::geometry::MetricKind;
use crate::losses::{BaMode, LossKind, MarginSpec, SamplingScheme, SamplingVariant, CONTRASTIVE_MARGIN, TRIPLET_HARD_MARGIN};
use crate::train::{LrSchedule, TrainConfig};

/// Raised for a missing or malformed setting; the CLI maps it to a usage error.
#[derive(Debug, thiserror::Error)]
#[error("invalid value for `{field}`: {msg}")]
pub struct ConfigError {
    pub field: String,
    pub msg: String,
}

fn field_err(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), msg: msg.into() }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            values.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    /// Overrides entries with `other`'s.
    pub fn overlay(&mut self, other: &Settings) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| field_err(key, "required but not set"))
    }

    fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| field_err(key, format!("cannot parse {v:?}"))),
        }
    }

    fn choice<T>(&self, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => parse(v).ok_or_else(|| field_err(key, format!("unknown value {v:?}"))),
        }
    }

    fn list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some("") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| field_err(key, format!("bad entry {s:?}"))))
                .collect(),
        }
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.require("seed")?.parse().map_err(|_| field_err("seed", "not an unsigned integer"))
    }

    pub fn seed_or(&self, default: u64) -> Result<u64, ConfigError> {
        self.parse_or("seed", default)
    }

    pub fn metric(&self) -> Result<MetricKind, ConfigError> {
        self.choice("metric", MetricKind::Euclidean, MetricKind::parse)
    }

    /// Training configuration. `seed` is mandatory.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let loss_kind = self.choice("loss", LossKind::Triplet, LossKind::parse)?;
        let variant = self.choice("sampling", SamplingVariant::BatchSample, SamplingVariant::parse)?;
        let mut config = TrainConfig::new(loss_kind, variant, self.seed()?);
        config.scheme = SamplingScheme { variant, ba_mode: self.choice("ba_mode", BaMode::PerTriplet, BaMode::parse)? };

        let default_margin = match loss_kind {
            LossKind::Triplet => "softplus",
            LossKind::Contrastive => "hard",
        };
        let default_alpha = match loss_kind {
            LossKind::Triplet => TRIPLET_HARD_MARGIN,
            LossKind::Contrastive => CONTRASTIVE_MARGIN,
        };
        config.margin = match self.get("margin").unwrap_or(default_margin) {
            "softplus" => {
                if self.get("alpha").is_some() {
                    return Err(field_err("alpha", "a margin value needs margin=hard"));
                }
                MarginSpec::Softplus
            }
            "hard" => {
                let alpha = self.parse_or("alpha", default_alpha)?;
                MarginSpec::Hard(alpha).validate().map_err(|e| field_err("alpha", e.to_string()))?
            }
            other => return Err(field_err("margin", format!("unknown value {other:?}"))),
        };

        config.p = self.parse_or("p", config.p)?;
        config.k = self.parse_or("k", config.k)?;
        config.epochs = self.parse_or("epochs", config.epochs)?;
        config.lr = match self.get("lr") {
            Some(_) => LrSchedule::Fixed(self.parse_or("lr", 0.0)?),
            None => self.choice("lr_schedule", LrSchedule::Scratch, |s| match s {
                "scratch" => Some(LrSchedule::Scratch),
                "pretrained" => Some(LrSchedule::Pretrained),
                _ => None,
            })?,
        };
        config.beta1 = self.parse_or("adam_beta1", config.beta1)?;
        config.beta2 = self.parse_or("adam_beta2", config.beta2)?;
        config.adam_eps = self.parse_or("adam_eps", config.adam_eps)?;
        config.metric = self.metric()?;
        config.normalize = self.parse_or("normalize", config.normalize)?;
        config.hidden = self.list("hidden", &config.hidden)?;
        config.embedding_dim = self.parse_or("embedding_dim", config.embedding_dim)?;
        config.feature_noise = self.parse_or("feature_noise", config.feature_noise)?;

        if config.p < 2 {
            return Err(field_err("p", "must be >= 2"));
        }
        if config.k < 2 {
            return Err(field_err("k", "must be >= 2"));
        }
        if config.embedding_dim == 0 {
            return Err(field_err("embedding_dim", "must be positive"));
        }
        if config.hidden.contains(&0) {
            return Err(field_err("hidden", "layer sizes must be positive"));
        }
        config.adam().validate().map_err(|e| field_err("adam", e.to_string()))?;
        if !config.feature_noise.is_finite() || config.feature_noise < 0.0 {
            return Err(field_err("feature_noise", "must be finite and >= 0"));
        }
        Ok(config)
    }

    pub fn protocol(&self) -> Result<ProtocolSpec, ConfigError> {
        let kind = self.choice("protocol", ProtocolKind::CrossCamera, ProtocolKind::parse)?;
        let trials = match kind {
            ProtocolKind::CrossCamera => 1,
            ProtocolKind::RepeatedGallery => self.parse_or("trials", DEFAULT_TRIALS)?,
        };
        let spec = ProtocolSpec { kind, trials, cutoffs: self.list("cutoffs", &DEFAULT_CUTOFFS)? };
        spec.validate().map_err(|e| field_err(if trials == 0 { "trials" } else { "cutoffs" }, e.to_string()))?;
        Ok(spec)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, ConfigError> {
        let d = SynthSpec::default();
        let spec = SynthSpec {
            identities: self.parse_or("identities", d.identities)?,
            held_out_identities: self.parse_or("held_out", d.held_out_identities)?,
            samples_per_identity: self.parse_or("samples", d.samples_per_identity)?,
            dim: self.parse_or("dim", d.dim)?,
            viewpoints: self.parse_or("viewpoints", d.viewpoints)?,
            sigma_id: self.parse_or("sigma_id", d.sigma_id)?,
            sigma_view: self.parse_or("sigma_view", d.sigma_view)?,
            sigma_noise: self.parse_or("sigma_noise", d.sigma_noise)?,
            cameras_per_identity: self.parse_or("cameras", d.cameras_per_identity)?,
            seed: self.seed_or(d.seed)?,
        };
        spec.validate().map_err(|e| field_err("synth", e.to_string()))?;
        Ok(spec)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
