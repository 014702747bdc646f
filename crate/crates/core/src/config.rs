//! `key = value` configuration text shared by config files, `--set`
//! overrides and checkpoint headers.
//!
//! Keys are namespaced: `encoder.*`, `train.*`, `loss.*`. Blank lines and
//! `#` comments are ignored; unknown keys are errors.

use std::fmt::Display;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use crate::tsp_loss::LossParams;

/// Splits configuration text into `(key, value)` pairs, in order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

/// The complete set of tunables for a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (e, t) = (&mut self.encoder, &mut self.train);
        match key {
            "encoder.depth" => e.depth = parse(key, value)?,
            "encoder.dim" => e.dim = parse(key, value)?,
            "encoder.heads" => e.heads = parse(key, value)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, value)?,
            "encoder.patch" => e.patch = parse(key, value)?,
            "encoder.image" => e.image = parse(key, value)?,
            "encoder.pixel_mean" => e.pixel_norm.mean = parse(key, value)?,
            "encoder.pixel_std" => e.pixel_norm.std = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.accum_steps" => t.accum_steps = parse(key, value)?,
            "train.lr_peak" => t.lr_peak = parse(key, value)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, value)?,
            "train.total_steps" => t.total_steps = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "train.mask_ratio" => t.mask_ratio = parse(key, value)?,
            "train.kappa" => t.kappa = parse(key, value)?,
            "train.tau_init" => t.tau_init = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train.parallel" => t.parallel = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its current value; floats print in shortest
    /// round-trip form.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (e, t) = (&self.encoder, &self.train);
        vec![
            ("encoder.depth", e.depth.to_string()),
            ("encoder.dim", e.dim.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            ("encoder.patch", e.patch.to_string()),
            ("encoder.image", e.image.to_string()),
            ("encoder.pixel_mean", e.pixel_norm.mean.to_string()),
            ("encoder.pixel_std", e.pixel_norm.std.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.accum_steps", t.accum_steps.to_string()),
            ("train.lr_peak", t.lr_peak.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.total_steps", t.total_steps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.mask_ratio", t.mask_ratio.to_string()),
            ("train.kappa", t.kappa.to_string()),
            ("train.tau_init", t.tau_init.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.parallel", t.parallel.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Loss settings that are not tensors: `loss.kappa`, `loss.tau_min`, `loss.tau_max`.
pub(crate) fn loss_entries(p: &LossParams) -> Vec<(&'static str, String)> {
    vec![
        ("loss.kappa", p.kappa.to_string()),
        ("loss.tau_min", p.tau_min.to_string()),
        ("loss.tau_max", p.tau_max.to_string()),
    ]
}

pub(crate) fn set_loss(p: &mut LossParams, key: &str, value: &str) -> Result<()> {
    match key {
        "loss.kappa" => p.kappa = parse(key, value)?,
        "loss.tau_min" => p.tau_min = parse(key, value)?,
        "loss.tau_max" => p.tau_max = parse(key, value)?,
        _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
    }
    Ok(())
}
