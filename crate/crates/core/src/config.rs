//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment anywhere on a line; blank
//! lines are ignored. Later layers (file, then flags) override earlier ones.

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::HausdorffVariant;
use crate::net::NetworkSpec;
use crate::train::TrainConfig;

/// Every tunable of a run. `seed` drives parameter init and data generation;
/// the shuffle seed defaults to `seed + 1` unless set.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub samples: usize,
    pub synth: SynthConfig,
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    shuffle_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            samples: 8,
            synth: SynthConfig::default(),
            spec: NetworkSpec::default(),
            train: TrainConfig::default(),
            shuffle_seed: None,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in manifest order.
pub const KEYS: &[&str] = &[
    "seed",
    "shuffle_seed",
    "samples",
    "size",
    "blob_min",
    "blob_max",
    "contrast",
    "noise_sigma",
    "boundary_jitter",
    "levels",
    "base_channels",
    "shape_channels",
    "dspp_rates",
    "dspp_channels",
    "lambda1",
    "lambda2",
    "lambda3",
    "epsilon",
    "lr",
    "epochs",
    "batch_size",
    "beta_mode",
    "eval_every",
    "checkpoint_every",
    "hd95",
];

/// Split config text into ordered `(key, value)` pairs. Syntax only: keys
/// are not checked against [`KEYS`]. Never panics.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(format!("line {}: invalid key {k:?}", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or_else(|| self.seed.wrapping_add(1))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "shuffle_seed" => self.shuffle_seed = Some(num(key, v)?),
            "samples" => self.samples = num(key, v)?,
            "size" => self.synth.size = num(key, v)?,
            "blob_min" => self.synth.blob_count.0 = num(key, v)?,
            "blob_max" => self.synth.blob_count.1 = num(key, v)?,
            "contrast" => self.synth.contrast = num(key, v)?,
            "noise_sigma" => self.synth.noise_sigma = num(key, v)?,
            "boundary_jitter" => self.synth.boundary_jitter = num(key, v)?,
            "levels" => self.spec.levels = num(key, v)?,
            "base_channels" => self.spec.base_channels = num(key, v)?,
            "shape_channels" => self.spec.shape_channels = num(key, v)?,
            "dspp_rates" => {
                self.spec.dspp.dilation_rates =
                    v.split(',').map(|r| num(key, r.trim())).collect::<Result<Vec<usize>>>()?
            }
            "dspp_channels" => self.spec.dspp.out_channels = num(key, v)?,
            "lambda1" => self.train.weights.lambda1 = num(key, v)?,
            "lambda2" => self.train.weights.lambda2 = num(key, v)?,
            "lambda3" => self.train.weights.lambda3 = num(key, v)?,
            "epsilon" => self.train.weights.epsilon = num(key, v)?,
            "lr" => self.train.alpha0 = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "beta_mode" => self.train.beta_mode = v.parse()?,
            "eval_every" => self.train.eval_every = num(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "hd95" => {
                self.train.hausdorff =
                    if flag(key, v)? { HausdorffVariant::Percentile95 } else { HausdorffVariant::Max }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a config file's assignments on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.synth;
        let w = &self.train.weights;
        Some(match key {
            "seed" => self.seed.to_string(),
            "shuffle_seed" => self.shuffle_seed().to_string(),
            "samples" => self.samples.to_string(),
            "size" => s.size.to_string(),
            "blob_min" => s.blob_count.0.to_string(),
            "blob_max" => s.blob_count.1.to_string(),
            "contrast" => s.contrast.to_string(),
            "noise_sigma" => s.noise_sigma.to_string(),
            "boundary_jitter" => s.boundary_jitter.to_string(),
            "levels" => self.spec.levels.to_string(),
            "base_channels" => self.spec.base_channels.to_string(),
            "shape_channels" => self.spec.shape_channels.to_string(),
            "dspp_rates" => {
                let r: Vec<String> = self.spec.dspp.dilation_rates.iter().map(|r| r.to_string()).collect();
                r.join(",")
            }
            "dspp_channels" => self.spec.dspp.out_channels.to_string(),
            "lambda1" => w.lambda1.to_string(),
            "lambda2" => w.lambda2.to_string(),
            "lambda3" => w.lambda3.to_string(),
            "epsilon" => w.epsilon.to_string(),
            "lr" => self.train.alpha0.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "beta_mode" => self.train.beta_mode.to_string(),
            "eval_every" => self.train.eval_every.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "hd95" => (self.train.hausdorff == HausdorffVariant::Percentile95).to_string(),
            _ => return None,
        })
    }

    /// Every key with its effective value. Feeding the result back through
    /// [`RunConfig::set`] reproduces `self`, apart from an unset shuffle seed
    /// becoming explicit.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).expect("every key has a value"))).collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Synthetic generator settings for the training split.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, shuffle_seed: self.shuffle_seed(), ..self.train.clone() }
    }

    pub fn is_no_edge_ablation(&self) -> bool {
        self.train.weights.is_no_edge_ablation()
    }

    /// Check every section and their compatibility.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.spec.validate()?;
        self.train.validate()?;
        if self.samples == 0 {
            return Err(Error::Config("samples must be >= 1".into()));
        }
        let d = self.spec.size_divisor();
        if !self.synth.size.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "size {} is not divisible by {d}, required by levels={}",
                self.synth.size, self.spec.levels
            )));
        }
        Ok(())
    }
}
