//! `key=value` run configuration with dotted keys and `#` comments.

use std::path::PathBuf;

use befd_core::train::TrainConfig;
use befd_core::NetworkVariant;

/// Training settings plus where the data comes from.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { train: TrainConfig::default(), data: None }
    }
}

pub const KEYS: &[&str] = &[
    "data.manifest",
    "train.iterations",
    "train.batch_size",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.seed",
    "train.checkpoint_every",
    "train.variant",
    "unet.depth",
    "unet.base_channels",
    "unet.be_levels",
    "unet.fd_skips",
    "attention.lambda_min",
    "attention.lambda_max",
    "attention.alpha",
    "attention.beta",
    "clahe.tiles_x",
    "clahe.tiles_y",
    "clahe.clip_limit",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim())).collect()
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "data.manifest" => self.data = Some(PathBuf::from(v)),
            "train.iterations" => t.iterations = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr" => t.learning_rate = num(key, v)?,
            "train.beta1" => t.adam_beta1 = num(key, v)?,
            "train.beta2" => t.adam_beta2 = num(key, v)?,
            "train.epsilon" => t.adam_epsilon = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "train.variant" => t.variant = v.parse::<NetworkVariant>().map_err(|e| format!("`{key}`: {e}"))?,
            "unet.depth" => t.unet.depth = num(key, v)?,
            "unet.base_channels" => t.unet.base_channels = num(key, v)?,
            "unet.be_levels" => t.unet.be_levels = list(key, v)?,
            "unet.fd_skips" => t.unet.fd_skips = list(key, v)?,
            "attention.lambda_min" => t.attention.lambda_min = num(key, v)?,
            "attention.lambda_max" => t.attention.lambda_max = num(key, v)?,
            "attention.alpha" => t.attention.alpha = num(key, v)?,
            "attention.beta" => t.attention.beta = num(key, v)?,
            "clahe.tiles_x" => t.clahe.tiles.0 = num(key, v)?,
            "clahe.tiles_y" => t.clahe.tiles.1 = num(key, v)?,
            "clahe.clip_limit" => t.clahe.clip_limit = num(key, v)?,
            _ => return Err(format!("unknown configuration key `{key}` (known: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text` in order.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value, got `{raw}`", i + 1))?;
            self.set(k.trim(), v.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }
}
