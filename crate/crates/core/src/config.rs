//! Flat `key = value` configuration covering model widths and the training recipe.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

/// Every tunable with the published defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub esn_size: usize,
    pub mlp_hidden: usize,
    pub code_dim: usize,
    pub categories: usize,
    pub speaker_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub channels: usize,
    pub harmonic_blocks: usize,
    pub noise_blocks: usize,
    pub layers_per_block: usize,

    pub total_iters: usize,
    pub lr0: f64,
    pub lr_halve_at: Vec<usize>,
    pub pretrain_iters: usize,
    pub tau_decay: f64,
    pub tau_min: f64,
    pub tau_interval: usize,
    pub batch_size: usize,
    pub max_segment_sec: f64,
    pub jitter: f64,
    pub kl_weight: f64,
    pub f0_loss: bool,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            esn_size: 2048,
            mlp_hidden: 128,
            code_dim: 128,
            categories: 256,
            speaker_dim: 128,
            lstm_hidden: 128,
            lstm_layers: 3,
            channels: 64,
            harmonic_blocks: 5,
            noise_blocks: 1,
            layers_per_block: 10,
            total_iters: 36_000,
            lr0: 4e-4,
            lr_halve_at: vec![16_000, 24_000, 32_000],
            pretrain_iters: 4000,
            tau_decay: 1e-5,
            tau_min: 0.5,
            tau_interval: 1000,
            batch_size: 16,
            max_segment_sec: 1.0,
            jitter: 0.12,
            kl_weight: 1.0,
            f0_loss: false,
            grad_clip: 10.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 1000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "esn_size" => self.esn_size = parse(key, v)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, v)?,
            "code_dim" => self.code_dim = parse(key, v)?,
            "categories" => self.categories = parse(key, v)?,
            "speaker_dim" => self.speaker_dim = parse(key, v)?,
            "lstm_hidden" => self.lstm_hidden = parse(key, v)?,
            "lstm_layers" => self.lstm_layers = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "harmonic_blocks" => self.harmonic_blocks = parse(key, v)?,
            "noise_blocks" => self.noise_blocks = parse(key, v)?,
            "layers_per_block" => self.layers_per_block = parse(key, v)?,
            "total_iters" => self.total_iters = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "lr_halve_at" => self.lr_halve_at = parse_list(key, v)?,
            "pretrain_iters" => self.pretrain_iters = parse(key, v)?,
            "tau_decay" => self.tau_decay = parse(key, v)?,
            "tau_min" => self.tau_min = parse(key, v)?,
            "tau_interval" => self.tau_interval = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_segment_sec" => self.max_segment_sec = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            "kl_weight" => self.kl_weight = parse(key, v)?,
            "f0_loss" => self.f0_loss = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("esn_size", self.esn_size.to_string());
        kv("mlp_hidden", self.mlp_hidden.to_string());
        kv("code_dim", self.code_dim.to_string());
        kv("categories", self.categories.to_string());
        kv("speaker_dim", self.speaker_dim.to_string());
        kv("lstm_hidden", self.lstm_hidden.to_string());
        kv("lstm_layers", self.lstm_layers.to_string());
        kv("channels", self.channels.to_string());
        kv("harmonic_blocks", self.harmonic_blocks.to_string());
        kv("noise_blocks", self.noise_blocks.to_string());
        kv("layers_per_block", self.layers_per_block.to_string());
        kv("total_iters", self.total_iters.to_string());
        kv("lr0", format!("{:e}", self.lr0));
        kv("lr_halve_at", list(&self.lr_halve_at));
        kv("pretrain_iters", self.pretrain_iters.to_string());
        kv("tau_decay", format!("{:e}", self.tau_decay));
        kv("tau_min", self.tau_min.to_string());
        kv("tau_interval", self.tau_interval.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_segment_sec", self.max_segment_sec.to_string());
        kv("jitter", self.jitter.to_string());
        kv("kl_weight", self.kl_weight.to_string());
        kv("f0_loss", self.f0_loss.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", format!("{:e}", self.adam_eps));
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if [self.esn_size, self.mlp_hidden, self.code_dim, self.categories, self.batch_size].contains(&0) {
            return bad("model widths and batch size must be positive");
        }
        if !(self.lr0 > 0.0) || !(self.tau_min > 0.0) || self.tau_interval == 0 {
            return bad("learning rate, tau_min and tau_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return bad("jitter must be a probability");
        }
        if !(self.max_segment_sec > 0.0) || !(self.kl_weight >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("max_segment_sec and grad_clip must be positive, kl_weight non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }
}
