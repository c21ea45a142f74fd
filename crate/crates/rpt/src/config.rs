//! Training configuration: defaults, validation, and a `key = value` file
//! format that round-trips exactly (the adaptation run echoes its resolved
//! configuration into the run directory).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, RptError};
use crate::losses::Thresholds;

/// All knobs for pretraining and adaptation. Defaults are tuned for the
/// bundled 64x64 street-scene benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Master seed; every stochastic stage derives its own stream from it.
    pub seed: u64,
    /// Probability thresholds of the three regularizers.
    pub threshold_pc: f64,
    pub threshold_cc: f64,
    pub threshold_sl: f64,
    /// Weight of the adversarial term in the model objective.
    pub adv_weight: f64,
    /// Fraction of superpixels retained by the complexity filter.
    pub keep_fraction: f64,
    /// How many times the voted targets are recomputed during adaptation.
    pub state_refreshes: usize,
    /// Superpixels per image.
    pub superpixels: usize,
    /// Superpixel compactness (color-vs-space balance).
    pub compactness: f64,
    pub slic_iters: usize,
    /// Clusters for the cluster-level vote.
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    /// Spatial-logic model size and training schedule.
    pub logic_hidden: usize,
    pub logic_epochs: usize,
    pub logic_lr: f64,
    /// Vertical strips per image when building category sequences.
    pub logic_strips: usize,
    /// Hidden width of the segmentation head.
    pub seg_hidden: usize,
    pub pretrain_iters: usize,
    pub adapt_iters: usize,
    pub pretrain_lr: f64,
    pub adapt_lr: f64,
    pub disc_lr: f64,
    /// Polynomial learning-rate decay exponent.
    pub poly_power: f64,
    /// Iterations between metrics rows.
    pub metrics_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            threshold_pc: 0.25,
            threshold_cc: 0.25,
            threshold_sl: 0.25,
            adv_weight: 0.1,
            keep_fraction: 0.5,
            state_refreshes: 3,
            superpixels: 192,
            compactness: 10.0,
            slic_iters: 10,
            kmeans_k: 32,
            kmeans_iters: 50,
            logic_hidden: 32,
            logic_epochs: 30,
            logic_lr: 0.1,
            logic_strips: 4,
            seg_hidden: 16,
            pretrain_iters: 2000,
            adapt_iters: 1500,
            pretrain_lr: 0.3,
            adapt_lr: 0.08,
            disc_lr: 0.2,
            poly_power: 0.9,
            metrics_every: 50,
        }
    }
}

/// Field table shared by the parser and the serializer.
macro_rules! config_fields {
    ($m:ident) => {
        $m!(
            (seed, u64),
            (threshold_pc, f64),
            (threshold_cc, f64),
            (threshold_sl, f64),
            (adv_weight, f64),
            (keep_fraction, f64),
            (state_refreshes, usize),
            (superpixels, usize),
            (compactness, f64),
            (slic_iters, usize),
            (kmeans_k, usize),
            (kmeans_iters, usize),
            (logic_hidden, usize),
            (logic_epochs, usize),
            (logic_lr, f64),
            (logic_strips, usize),
            (seg_hidden, usize),
            (pretrain_iters, usize),
            (adapt_iters, usize),
            (pretrain_lr, f64),
            (adapt_lr, f64),
            (disc_lr, f64),
            (poly_power, f64),
            (metrics_every, usize)
        );
    };
}

impl TrainConfig {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            pc: self.threshold_pc,
            cc: self.threshold_cc,
            sl: self.threshold_sl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds().validate()?;
        if self.adv_weight < 0.0 || !self.adv_weight.is_finite() {
            return Err(RptError::Invalid(format!(
                "adv_weight must be nonnegative, got {}",
                self.adv_weight
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(RptError::Invalid(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        for (name, v) in [
            ("superpixels", self.superpixels),
            ("slic_iters", self.slic_iters),
            ("kmeans_k", self.kmeans_k),
            ("kmeans_iters", self.kmeans_iters),
            ("logic_hidden", self.logic_hidden),
            ("logic_epochs", self.logic_epochs),
            ("logic_strips", self.logic_strips),
            ("seg_hidden", self.seg_hidden),
            ("adapt_iters", self.adapt_iters),
            ("metrics_every", self.metrics_every),
        ] {
            if v == 0 {
                return Err(RptError::Invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("compactness", self.compactness),
            ("logic_lr", self.logic_lr),
            ("pretrain_lr", self.pretrain_lr),
            ("adapt_lr", self.adapt_lr),
            ("disc_lr", self.disc_lr),
            ("poly_power", self.poly_power),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RptError::Invalid(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Render as `key = value` lines in declaration order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($(($field:ident, $ty:ty)),*) => {
                $(writeln!(out, "{} = {}", stringify!($field), self.$field).unwrap();)*
            };
        }
        config_fields!(emit);
        out
    }

    /// Set one field by name from its textual value. Unknown keys and
    /// unparsable values are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        macro_rules! apply {
            ($(($field:ident, $ty:ty)),*) => {
                $(
                    if key == stringify!($field) {
                        self.$field = value.parse::<$ty>().map_err(|_| {
                            RptError::Format(format!(
                                "config value for {key} is not a valid {}: {value}",
                                stringify!($ty)
                            ))
                        })?;
                        return Ok(());
                    }
                )*
            };
        }
        config_fields!(apply);
        Err(RptError::Format(format!("unknown config key: {key}")))
    }

    /// Parse `key = value` lines. Blank lines and `#` comments are allowed;
    /// unknown or repeated keys are rejected. Keys not mentioned keep their
    /// defaults.
    pub fn from_file_string(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(RptError::Format(format!(
                    "config line {} is not `key = value`: {raw}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if seen.iter().any(|s| s == key) {
                return Err(RptError::Format(format!("config key repeated: {key}")));
            }
            cfg.set(key, value)?;
            seen.push(key.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| RptError::io(path, e))?;
        let cfg = TrainConfig::from_file_string(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| RptError::io(path, e))
    }
}
