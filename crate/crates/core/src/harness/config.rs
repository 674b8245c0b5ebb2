//! Training configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments and blank lines are ignored
//! optimizer = adaptive-moment
//! learning_rate = 0.0001
//! channel_schedule = 64,128,192,256
//! mode = dual
//! no_cpfm = false
//! ```
//!
//! The architecture is picked either with `mode = <tag>` or with one of the
//! boolean switches `single_branch_magnitude`, `single_branch_derivative`,
//! `concat_input`, `shared_params`; at most one may be set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchMode, ModelConfig};
use crate::spectra::DerivativeSpec;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CSCN_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Adam with betas (0.9, 0.999).
    #[default]
    AdaptiveMoment,
    /// SGD with momentum 0.9.
    MomentumSgd,
}

impl OptimizerKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptimizerKind::AdaptiveMoment => "adaptive-moment",
            OptimizerKind::MomentumSgd => "momentum-sgd",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "adaptive-moment" | "adam" => Some(OptimizerKind::AdaptiveMoment),
            "momentum-sgd" | "sgd" => Some(OptimizerKind::MomentumSgd),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// One full-scene step per epoch.
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub derivative: DerivativeSpec,
    pub mode: ArchMode,
    pub cpfm: bool,
    pub hd_loss: bool,
    pub channel_schedule: Vec<usize>,
    pub fused_channels: usize,
    pub kernel: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdaptiveMoment,
            learning_rate: 1e-4,
            epochs: 600,
            lambda: 1.0,
            seed: 0,
            derivative: DerivativeSpec::default(),
            mode: ArchMode::Dual,
            cpfm: true,
            hd_loss: true,
            channel_schedule: vec![64, 128, 192, 256],
            fused_channels: 128,
            kernel: 3,
        }
    }
}

impl TrainConfig {
    /// The momentum-SGD setting used on the small benchmark scenes.
    pub fn benchmark() -> Self {
        Self {
            optimizer: OptimizerKind::MomentumSgd,
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        self.derivative.validate()?;
        if self.channel_schedule.len() < 2 || self.channel_schedule.contains(&0) {
            return Err(Error::Config("channel_schedule needs at least 2 positive entries".into()));
        }
        if self.fused_channels == 0 {
            return Err(Error::Config("fused_channels must be positive".into()));
        }
        if !matches!(self.kernel, 3 | 5) {
            return Err(Error::Config(format!("kernel {} not in {{3, 5}}", self.kernel)));
        }
        Ok(())
    }

    pub fn model_config(&self, bands: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            cpfm: self.cpfm,
            hd_loss: self.hd_loss,
            channel_schedule: self.channel_schedule.clone(),
            fused_channels: self.fused_channels,
            kernel: self.kernel,
            classes,
            bands,
            derivative: self.derivative,
        }
    }

    /// Key/value pairs in file order; [`TrainConfig::parse`] reads them back.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let schedule: Vec<String> = self.channel_schedule.iter().map(usize::to_string).collect();
        [
            ("optimizer", self.optimizer.tag().to_string()),
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("epochs", self.epochs.to_string()),
            ("lambda", format!("{:e}", self.lambda)),
            ("seed", self.seed.to_string()),
            ("derivative_order", self.derivative.order.to_string()),
            ("derivative_step", self.derivative.step.to_string()),
            ("mode", self.mode.tag().to_string()),
            ("no_cpfm", (!self.cpfm).to_string()),
            ("no_hd_loss", (!self.hd_loss).to_string()),
            ("channel_schedule", schedule.join(",")),
            ("fused_channels", self.fused_channels.to_string()),
            ("kernel", self.kernel.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut mode_switches = Vec::new();
        for (key, value) in pairs {
            let key = key.as_str();
            match key {
                "optimizer" => {
                    cfg.optimizer = OptimizerKind::from_tag(value)
                        .ok_or_else(|| Error::Config(format!("unknown optimizer `{value}`")))?
                }
                "learning_rate" => cfg.learning_rate = num(key, value)?,
                "epochs" => cfg.epochs = num(key, value)?,
                "lambda" => cfg.lambda = num(key, value)?,
                "seed" => cfg.seed = num(key, value)?,
                "derivative_order" => cfg.derivative.order = num(key, value)?,
                "derivative_step" => cfg.derivative.step = num(key, value)?,
                "mode" => {
                    let mode = ArchMode::from_tag(value)
                        .ok_or_else(|| Error::Config(format!("unknown mode `{value}`")))?;
                    mode_switches.push(mode);
                }
                "single_branch_magnitude" | "single_branch_derivative" | "concat_input" | "shared_params" => {
                    if flag(key, value)? {
                        mode_switches.push(match key {
                            "single_branch_magnitude" => ArchMode::SingleMagnitude,
                            "single_branch_derivative" => ArchMode::SingleDerivative,
                            "concat_input" => ArchMode::ConcatInput,
                            _ => ArchMode::SharedParams,
                        });
                    }
                }
                "no_cpfm" => cfg.cpfm = !flag(key, value)?,
                "no_hd_loss" => cfg.hd_loss = !flag(key, value)?,
                "channel_schedule" => {
                    cfg.channel_schedule = value
                        .split(',')
                        .map(|s| num(key, s.trim()))
                        .collect::<Result<_>>()?
                }
                "fused_channels" => cfg.fused_channels = num(key, value)?,
                "kernel" => cfg.kernel = num(key, value)?,
                // Data-derived entries written into checkpoints.
                "bands" | "classes" => {}
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }
        mode_switches.dedup();
        match mode_switches[..] {
            [] => {}
            [mode] => cfg.mode = mode,
            _ => return Err(Error::Config("more than one architecture mode set".into())),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Replaces the seed with `CSCN_SEED` when that is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = num(SEED_ENV, v.trim())?;
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for {key}"))),
    }
}
