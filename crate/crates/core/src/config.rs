//! Flat `key = value` run configuration.
//!
//! A config file holds one assignment per line; `#` starts a comment and
//! blank lines are ignored. Later assignments win, so command-line
//! overrides are applied after the file. Unknown keys are errors.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::explain::{DEFAULT_HALFWIDTH, DEFAULT_THRESHOLD};
use crate::model::EncoderConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainSettings {
    /// `last_conv` or a tap name such as `backbone.stem2`.
    pub layer: String,
    pub halfwidth: usize,
    pub threshold: f64,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        ExplainSettings { layer: "last_conv".into(), halfwidth: DEFAULT_HALFWIDTH, threshold: DEFAULT_THRESHOLD }
    }
}

/// Every tunable of a run after defaults, file and overrides are merged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub folds: usize,
    pub synthetic: SyntheticConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub explain: ExplainSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            folds: 5,
            synthetic: SyntheticConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            explain: ExplainSettings::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "folds",
    "n_normal",
    "n_meta",
    "image_side",
    "noise_sigma",
    "family",
    "backbone",
    "blocks",
    "base_filters",
    "downsample_stages",
    "heads",
    "d_model",
    "mlp_dims",
    "mlp_dropout",
    "query_source",
    "epochs",
    "lr",
    "batch_size",
    "augment_factor",
    "layer",
    "halfwidth",
    "threshold",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

/// Splits `key=value` (whitespace around either side is trimmed).
pub fn parse_assignment(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{text}`")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config(format!("missing key in `{text}`")));
    }
    Ok((k.to_string(), v.to_string()))
}

/// Assignments of a config file body in order.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let line = line.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then(|| {
                parse_assignment(line).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))
            })
        })
        .collect()
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
            }
            "folds" => self.folds = parse(key, value)?,
            "n_normal" => self.synthetic.n_normal = parse(key, value)?,
            "n_meta" => self.synthetic.n_meta = parse(key, value)?,
            "image_side" => {
                self.synthetic.image_side = parse(key, value)?;
                self.encoder.image_side = self.synthetic.image_side;
            }
            "noise_sigma" => self.synthetic.noise_sigma = parse(key, value)?,
            "family" => self.encoder.family = value.parse()?,
            "backbone" => self.encoder.backbone.kind = value.parse()?,
            "blocks" => self.encoder.backbone.blocks = parse(key, value)?,
            "base_filters" => self.encoder.backbone.base_filters = parse(key, value)?,
            "downsample_stages" => self.encoder.backbone.downsample_stages = parse(key, value)?,
            "heads" => self.encoder.heads = parse(key, value)?,
            "d_model" => {
                self.encoder.d_model = parse(key, value)?;
                self.encoder.backbone.num_classes = self.encoder.d_model;
            }
            "mlp_dims" => {
                let dims: Vec<usize> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                match dims[..] {
                    [a, b] if a > 0 && b > 0 => self.encoder.mlp_dims = (a, b),
                    _ => return Err(Error::Config(format!("`mlp_dims` takes two positive sizes like 1024,512, got `{value}`"))),
                }
            }
            "mlp_dropout" => self.encoder.mlp_dropout = parse(key, value)?,
            "query_source" => self.encoder.query_source = value.parse()?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "augment_factor" => self.train.augment_factor = parse(key, value)?,
            "layer" => self.explain.layer = value.to_string(),
            "halfwidth" => self.explain.halfwidth = parse(key, value)?,
            "threshold" => self.explain.threshold = parse(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}` (known: {})", KEYS.join(", "))));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, assignments: &[(String, String)]) -> Result<()> {
        assignments.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Defaults, then `path` (if any), then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            s.apply(&parse_config_text(&text)?)?;
        }
        s.apply(overrides)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.explain.halfwidth == 0 {
            return Err(Error::Config("halfwidth must be at least 1".into()));
        }
        if !(self.explain.threshold > 0.0 && self.explain.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1], got {}", self.explain.threshold)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("settings serialize") + "\n"
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
