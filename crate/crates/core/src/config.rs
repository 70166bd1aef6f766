//! Run configuration: a plain-text `key = value` file whose entries can be
//! overridden one by one (command-line flags win over the file).
//!
//! ```text
//! # comments and blank lines are ignored
//! input1 = data/slice1.f32
//! input2 = data/slice2.f32
//! gamma_excl = 0.2
//! epochs = 2000
//! filter_mode = shallow_dip
//! channels = 16,32,64,64
//! seed = 42
//! ```
//!
//! [`SeparationConfig::to_kv`] writes every key, so a run's recorded config
//! reproduces the run exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{AnchorSchedule, FilterMode, ModelConfig};
use crate::nn::{NetworkSpec, DEFAULT_CHANNELS, DEFAULT_LEAKY_SLOPE, DEFAULT_SKIP_CHANNELS};

/// Floating-point type used for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" | "single" => Ok(Precision::F32),
            "f64" | "double" => Ok(Precision::F64),
            _ => Err(format!("unknown precision `{s}` (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// All hyperparameters of one separation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationConfig {
    pub input1: Option<PathBuf>,
    pub input2: Option<PathBuf>,
    pub gamma_excl: f64,
    pub epochs: usize,
    pub filter_mode: FilterMode,
    /// Slice whose ghost in the other slice is low-pass filtered (1 or 2).
    pub lowpass_slice: u8,
    pub learning_rate: f64,
    /// `None` until [`ensure_seed`](Self::ensure_seed) records one.
    pub seed: Option<u64>,
    pub precision: Precision,
    pub channels: Vec<usize>,
    pub skip_channels: usize,
    pub leaky_slope: f64,
    /// Snapshot interval in epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Standard deviation of per-epoch Gaussian jitter on the `z` inputs.
    pub z_jitter: f64,
    pub anchor_epochs: usize,
    pub anchor_weight: f64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            input1: None,
            input2: None,
            gamma_excl: 0.2,
            epochs: 2000,
            filter_mode: FilterMode::ShallowDip,
            lowpass_slice: 1,
            learning_rate: 1e-3,
            seed: None,
            precision: Precision::F32,
            channels: DEFAULT_CHANNELS.to_vec(),
            skip_channels: DEFAULT_SKIP_CHANNELS,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            checkpoint_every: 500,
            z_jitter: 0.0,
            anchor_epochs: 100,
            anchor_weight: 1.0,
        }
    }
}

/// Every key accepted by [`SeparationConfig::set`], in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "input1",
    "input2",
    "gamma_excl",
    "epochs",
    "filter_mode",
    "lowpass_slice",
    "learning_rate",
    "seed",
    "precision",
    "channels",
    "depth",
    "skip_channels",
    "leaky_slope",
    "checkpoint_every",
    "z_jitter",
    "anchor_epochs",
    "anchor_weight",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

impl SeparationConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "input1" => self.input1 = Some(PathBuf::from(value)),
            "input2" => self.input2 = Some(PathBuf::from(value)),
            "gamma_excl" => self.gamma_excl = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "filter_mode" => self.filter_mode = value.parse().map_err(Error::Config)?,
            "lowpass_slice" => self.lowpass_slice = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            "precision" => self.precision = value.parse().map_err(Error::Config)?,
            "channels" => {
                self.channels = value.split(',').map(|c| parse(key, c.trim())).collect::<Result<_>>()?;
            }
            "depth" => {
                let depth: usize = parse(key, value)?;
                let last = *self.channels.last().unwrap_or(&DEFAULT_CHANNELS[DEFAULT_CHANNELS.len() - 1]);
                self.channels.resize(depth, last);
            }
            "skip_channels" => self.skip_channels = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "z_jitter" => self.z_jitter = parse(key, value)?,
            "anchor_epochs" => self.anchor_epochs = parse(key, value)?,
            "anchor_weight" => self.anchor_weight = parse(key, value)?,
            other => return config_err(format!("unknown configuration key `{other}`")),
        }
        Ok(())
    }

    /// Apply a whole `key = value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = SeparationConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SeparationConfig::from_text(&text)
    }

    /// Serialize every setting; parsing the result gives back `self`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        if let Some(p) = path(&self.input1) {
            let _ = writeln!(s, "input1 = {p}");
        }
        if let Some(p) = path(&self.input2) {
            let _ = writeln!(s, "input2 = {p}");
        }
        let _ = writeln!(s, "gamma_excl = {}", self.gamma_excl);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "filter_mode = {}", self.filter_mode);
        let _ = writeln!(s, "lowpass_slice = {}", self.lowpass_slice);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        let _ = writeln!(s, "precision = {}", self.precision);
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "channels = {}", ch.join(","));
        let _ = writeln!(s, "skip_channels = {}", self.skip_channels);
        let _ = writeln!(s, "leaky_slope = {}", self.leaky_slope);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "z_jitter = {}", self.z_jitter);
        let _ = writeln!(s, "anchor_epochs = {}", self.anchor_epochs);
        let _ = writeln!(s, "anchor_weight = {}", self.anchor_weight);
        s
    }

    pub fn network(&self) -> NetworkSpec {
        let mut spec = NetworkSpec::deep(1, 1).with_channels(self.channels.clone(), self.skip_channels);
        spec.leaky_slope = self.leaky_slope;
        spec
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            network: self.network(),
            filter_mode: self.filter_mode,
            lowpass_slice: self.lowpass_slice,
            anchor: AnchorSchedule { epochs: self.anchor_epochs, weight: self.anchor_weight },
        }
    }

    /// Check every setting before anything is allocated.
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                config_err(format!("{name} must be finite and non-negative, got {v}"))
            }
        };
        finite_nonneg("gamma_excl", self.gamma_excl)?;
        finite_nonneg("z_jitter", self.z_jitter)?;
        finite_nonneg("anchor_weight", self.anchor_weight)?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return config_err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !matches!(self.lowpass_slice, 1 | 2) {
            return config_err(format!("lowpass_slice must be 1 or 2, got {}", self.lowpass_slice));
        }
        if self.skip_channels == 0 {
            return config_err("skip_channels must be positive");
        }
        self.network().validate()
    }

    /// Return the seed, drawing and recording a fresh one if none is set.
    pub fn ensure_seed(&mut self) -> u64 {
        *self.seed.get_or_insert_with(rand::random)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = SeparationConfig {
            input1: Some("a b/one.f32".into()),
            gamma_excl: 0.1 + 0.2,
            seed: Some(u64::MAX),
            channels: vec![4, 8],
            precision: Precision::F64,
            ..SeparationConfig::default()
        };
        assert_eq!(SeparationConfig::from_text(&cfg.to_kv()).unwrap(), cfg);
        assert_eq!(CONFIG_KEYS.len(), 17);
    }

    #[test]
    fn parse_errors_name_the_key() {
        let err = SeparationConfig::from_text("epochs = many").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        assert!(SeparationConfig::from_text("colour = red").is_err());
        assert!(SeparationConfig::from_text("just words").is_err());
    }

    #[test]
    fn depth_resizes_schedule() {
        let cfg = SeparationConfig::from_text("channels = 8,16\ndepth = 3").unwrap();
        assert_eq!(cfg.channels, vec![8, 16, 16]);
        assert_eq!(cfg.network().depth, 3);
    }

    #[test]
    fn validation() {
        let mut cfg = SeparationConfig::default();
        cfg.validate().unwrap();
        cfg.gamma_excl = -1.0;
        assert!(cfg.validate().is_err());
        let cfg = SeparationConfig { lowpass_slice: 3, ..SeparationConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
