//! Flat `key = value` config files. Keys are exactly the struct field names;
//! lists are space-separated; `#` starts a comment. Unknown keys are errors,
//! omitted keys keep their defaults.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Splits config text into (key, value) pairs, preserving order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split_whitespace().map(|t| num(key, t)).collect()
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let l = list(key, v)?;
    l.try_into()
        .map_err(|l: Vec<usize>| Error::config(format!("{key}: expected 3 values, got {}", l.len())))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join(l: &[usize]) -> String {
    l.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl TrainConfig {
    /// Applies one key/value override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "peak_lr" => self.peak_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "window" => self.window = triple(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dice_weight" => self.dice_weight = num(key, value)?,
            "ce_weight" => self.ce_weight = num(key, value)?,
            _ => return Err(Error::config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "peak_lr = {}\nweight_decay = {}\nwarmup_steps = {}\ntotal_steps = {}\n\
             batch_size = {}\nwindow = {}\nseed = {}\ndice_weight = {}\nce_weight = {}\n",
            self.peak_lr,
            self.weight_decay,
            self.warmup_steps,
            self.total_steps,
            self.batch_size,
            join(&self.window),
            self.seed,
            self.dice_weight,
            self.ce_weight,
        )
    }
}

impl ModelConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "in_channels" => self.in_channels = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "depths" => self.depths = list(key, value)?,
            "heads" => self.heads = list(key, value)?,
            "widths" => self.widths = list(key, value)?,
            "decoder_widths" => self.decoder_widths = list(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "block_aggregation" => self.block_aggregation = flag(key, value)?,
            "window" => self.window = triple(key, value)?,
            _ => return Err(Error::config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::micro();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "in_channels = {}\nclasses = {}\npatch = {}\ndepths = {}\nheads = {}\nwidths = {}\n\
             decoder_widths = {}\nmlp_ratio = {}\nblock_aggregation = {}\nwindow = {}\n",
            self.in_channels,
            self.classes,
            self.patch,
            join(&self.depths),
            join(&self.heads),
            join(&self.widths),
            join(&self.decoder_widths),
            self.mlp_ratio,
            self.block_aggregation,
            join(&self.window),
        )
    }
}
