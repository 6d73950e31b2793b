//! Model configuration and its line-based `key = value` text form.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::snn::LifParams;

/// Network width preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchScale {
    /// Encoder 32-64-128-256.
    Full,
    /// Every width divided by four.
    Desk,
}

impl fmt::Display for ArchScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchScale::Full => "full",
            ArchScale::Desk => "desk",
        })
    }
}

impl FromStr for ArchScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ArchScale::Full),
            "desk" => Ok(ArchScale::Desk),
            other => Err(Error::Config(format!("unknown arch_scale {other:?} (expected full or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub steps: usize,
    pub v_theta: f32,
    pub decay: f32,
    pub v_reset: f32,
    pub alpha: f32,
    pub latent_dim: usize,
    pub lambda_mmd: f64,
    pub lr: f32,
    pub weight_decay: f32,
    pub bottleneck_lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub arch_scale: ArchScale,
    pub seed: u64,
    pub image_size: usize,
    pub image_channels: usize,
    /// Encoder widths; empty means the preset of `arch_scale`.
    pub channels: Vec<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            steps: 16,
            v_theta: 0.2,
            decay: 0.25,
            v_reset: 0.0,
            alpha: 0.5,
            latent_dim: 128,
            lambda_mmd: 1.0,
            lr: 6e-4,
            weight_decay: 1e-3,
            bottleneck_lr: 6e-3,
            epochs: 300,
            batch_size: 64,
            arch_scale: ArchScale::Full,
            seed: 0,
            image_size: 32,
            image_channels: 1,
            channels: Vec::new(),
            clip_norm: 5.0,
        }
    }
}

const KEYS: &[&str] = &[
    "steps",
    "v_theta",
    "decay",
    "v_reset",
    "alpha",
    "latent_dim",
    "lambda_mmd",
    "lr",
    "weight_decay",
    "bottleneck_lr",
    "epochs",
    "batch_size",
    "arch_scale",
    "seed",
    "image_size",
    "image_channels",
    "channels",
    "clip_norm",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

impl ModelConfig {
    /// Desk-scale preset: quarter widths, `T = 8`.
    pub fn desk() -> Self {
        ModelConfig {
            arch_scale: ArchScale::Desk,
            steps: 8,
            ..ModelConfig::default()
        }
    }

    pub fn lif(&self) -> LifParams {
        LifParams {
            v_theta: self.v_theta,
            decay: self.decay,
            v_reset: self.v_reset,
            alpha: self.alpha,
        }
    }

    /// Encoder channel widths in order.
    pub fn encoder_channels(&self) -> Vec<usize> {
        if !self.channels.is_empty() {
            return self.channels.clone();
        }
        let full = [32, 64, 128, 256];
        match self.arch_scale {
            ArchScale::Full => full.to_vec(),
            ArchScale::Desk => full.iter().map(|c| c / 4).collect(),
        }
    }

    /// Whether `key` names a configuration field.
    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "v_theta" => self.v_theta = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "v_reset" => self.v_reset = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "lambda_mmd" => self.lambda_mmd = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "bottleneck_lr" => self.bottleneck_lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "arch_scale" => self.arch_scale = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "image_channels" => self.image_channels = parse(key, value)?,
            "channels" => {
                self.channels = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|c| parse(key, c.trim())).collect::<Result<_>>()?
                }
            }
            "clip_norm" => self.clip_norm = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Reads a config text, starting from the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in parse_pairs(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, one `key = value` line each, in a fixed order.
    pub fn to_text(&self) -> String {
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let values: [String; 18] = [
            self.steps.to_string(),
            self.v_theta.to_string(),
            self.decay.to_string(),
            self.v_reset.to_string(),
            self.alpha.to_string(),
            self.latent_dim.to_string(),
            self.lambda_mmd.to_string(),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.bottleneck_lr.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.arch_scale.to_string(),
            self.seed.to_string(),
            self.image_size.to_string(),
            self.image_channels.to_string(),
            channels.join(","),
            self.clip_norm.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.lif().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.steps == 0 || self.latent_dim == 0 || self.batch_size == 0 || self.image_channels == 0 {
            return Err(Error::Config("steps, latent_dim, batch_size and image_channels must be positive".into()));
        }
        if !(self.lambda_mmd >= 0.0) || !(self.lr > 0.0) || !(self.bottleneck_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive and lambda_mmd, weight_decay nonnegative".into()));
        }
        let channels = self.encoder_channels();
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::Config(format!("invalid channel list {channels:?}")));
        }
        let scale = 1usize << channels.len();
        if self.image_size < scale || !self.image_size.is_multiple_of(scale) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 2^{} for {} stride-2 layers",
                self.image_size,
                channels.len(),
                channels.len()
            )));
        }
        Ok(())
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}
