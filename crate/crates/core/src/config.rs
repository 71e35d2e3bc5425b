//! Flat `key=value` run configuration shared by the trainer, checkpoints and
//! the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Which branches are trained and how they are coupled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One left-to-right branch, cross-entropy only.
    UniL2R,
    /// One right-to-left branch, cross-entropy only.
    UniR2L,
    /// Two left-to-right branches with different initializations, KL-coupled.
    Aum,
    /// A left-to-right and a right-to-left branch, KL-coupled.
    Abm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::UniL2R, Variant::UniR2L, Variant::Aum, Variant::Abm];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::UniL2R => "uni-l2r",
            Variant::UniR2L => "uni-r2l",
            Variant::Aum => "aum",
            Variant::Abm => "abm",
        }
    }

    pub fn is_mutual(self) -> bool {
        matches!(self, Variant::Aum | Variant::Abm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {s:?}; choose one of uni-l2r, uni-r2l, aum, abm"
            ))
        })
    }
}

/// Architecture of a full model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Tiny float64 configuration for end-to-end gradient checks: D = 16,
    /// n = 16, d = 32 and a 12×12 feature grid for 12×12 inputs.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            variant: Variant::Abm,
            encoder: EncoderConfig {
                blocks: 1,
                layers_per_block: 1,
                growth_rate: 4,
                initial_channels: 4,
                out_channels: 16,
                downsample_factor: 1,
            },
            decoder: DecoderConfig {
                hidden: 16,
                attn_dim: 32,
                vocab_size,
                attention: AttentionConfig {
                    coverage_channels: 4,
                    small_kernel: 5,
                    large_kernel: Some(11),
                },
            },
        }
    }
}

/// Every setting of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub temperature: f64,
    /// Stop gradients through the second operand of the KL term.
    pub detach_target: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub patience: usize,
    pub max_drops: usize,
    /// Global gradient-norm threshold; 0 disables clipping.
    pub clip: f64,
    pub epochs: usize,
    /// Share of the data held out for validation; 0 validates on the
    /// training set itself.
    pub val_fraction: f64,
    pub seed: u64,
    /// Keep encoder parameters at their initial values.
    pub freeze_encoder: bool,
    /// Stop once validation ExpRate reaches this percentage.
    pub stop_exprate: Option<f64>,
    pub sort_by_length: bool,
    pub max_decode_len: usize,
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub attn_dim: usize,
    pub attention: AttentionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Abm,
            lambda: 0.5,
            temperature: 2.0,
            detach_target: false,
            batch_size: 16,
            lr: 1.0,
            rho: 0.95,
            eps: 1e-6,
            patience: 15,
            max_drops: 10,
            clip: 100.0,
            epochs: 200,
            val_fraction: 0.1,
            seed: 0,
            freeze_encoder: false,
            stop_exprate: None,
            sort_by_length: false,
            max_decode_len: 64,
            encoder: EncoderConfig::desk(),
            hidden: 64,
            attn_dim: 128,
            attention: AttentionConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            encoder: self.encoder.clone(),
            decoder: DecoderConfig {
                hidden: self.hidden,
                attn_dim: self.attn_dim,
                vocab_size,
                attention: self.attention.clone(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return bad("optimizer settings out of range".into());
        }
        if self.patience == 0 || self.max_drops == 0 {
            return bad("patience and max_drops must be at least 1".into());
        }
        if !(self.clip >= 0.0) {
            return bad("clip must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.max_decode_len == 0 {
            return bad("max_decode_len must be at least 1".into());
        }
        self.model(4).validate()
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "variant" => self.variant = value.parse()?,
            "lambda" => self.lambda = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "detach_target" => self.detach_target = parse_bool(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "max_drops" => self.max_drops = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "freeze_encoder" => self.freeze_encoder = parse_bool(key, value)?,
            "stop_exprate" => {
                self.stop_exprate = if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "sort_by_length" => self.sort_by_length = parse_bool(key, value)?,
            "max_decode_len" => self.max_decode_len = parse(key, value)?,
            "encoder.blocks" => self.encoder.blocks = parse(key, value)?,
            "encoder.layers" => self.encoder.layers_per_block = parse(key, value)?,
            "encoder.growth" => self.encoder.growth_rate = parse(key, value)?,
            "encoder.stem_channels" => self.encoder.initial_channels = parse(key, value)?,
            "encoder.channels" => self.encoder.out_channels = parse(key, value)?,
            "encoder.downsample" => self.encoder.downsample_factor = parse(key, value)?,
            "decoder.hidden" => self.hidden = parse(key, value)?,
            "decoder.attn_dim" => self.attn_dim = parse(key, value)?,
            "attention.channels" => self.attention.coverage_channels = parse(key, value)?,
            "attention.ks" => self.attention.small_kernel = parse(key, value)?,
            "attention.kl" => {
                let k: usize = parse(key, value)?;
                self.attention.large_kernel = (k > 0).then_some(k);
            }
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Every effective value, in a stable order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let v = |k: &str, x: String| (k.to_string(), x);
        vec![
            v("variant", self.variant.to_string()),
            v("lambda", self.lambda.to_string()),
            v("temperature", self.temperature.to_string()),
            v("detach_target", self.detach_target.to_string()),
            v("batch_size", self.batch_size.to_string()),
            v("lr", self.lr.to_string()),
            v("rho", self.rho.to_string()),
            v("eps", self.eps.to_string()),
            v("patience", self.patience.to_string()),
            v("max_drops", self.max_drops.to_string()),
            v("clip", self.clip.to_string()),
            v("epochs", self.epochs.to_string()),
            v("val_fraction", self.val_fraction.to_string()),
            v("seed", self.seed.to_string()),
            v("freeze_encoder", self.freeze_encoder.to_string()),
            v(
                "stop_exprate",
                self.stop_exprate.map_or("none".to_string(), |x| x.to_string()),
            ),
            v("sort_by_length", self.sort_by_length.to_string()),
            v("max_decode_len", self.max_decode_len.to_string()),
            v("encoder.blocks", self.encoder.blocks.to_string()),
            v("encoder.layers", self.encoder.layers_per_block.to_string()),
            v("encoder.growth", self.encoder.growth_rate.to_string()),
            v("encoder.stem_channels", self.encoder.initial_channels.to_string()),
            v("encoder.channels", self.encoder.out_channels.to_string()),
            v("encoder.downsample", self.encoder.downsample_factor.to_string()),
            v("decoder.hidden", self.hidden.to_string()),
            v("decoder.attn_dim", self.attn_dim.to_string()),
            v("attention.channels", self.attention.coverage_channels.to_string()),
            v("attention.ks", self.attention.small_kernel.to_string()),
            v("attention.kl", self.attention.large_kernel.unwrap_or(0).to_string()),
        ]
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_pairs(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Rebuilds a configuration from stored pairs, skipping the listed
    /// bookkeeping keys.
    pub fn from_pairs(pairs: &BTreeMap<String, String>, ignore: &[&str]) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in pairs {
            if !ignore.contains(&k.as_str()) {
                c.set(k, v)?;
            }
        }
        Ok(c)
    }
}

/// Parses `key=value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.lr, c.patience, c.max_drops, c.lambda), (16, 1.0, 15, 10, 0.5));
        c.validate().unwrap();
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_text("# run\nvariant = aum\nlambda=0.3\nattention.kl=0\nstop_exprate=95\n").unwrap();
        assert_eq!(c.variant, Variant::Aum);
        assert_eq!(c.attention.large_kernel, None);
        let map: BTreeMap<_, _> = c.pairs().into_iter().collect();
        assert_eq!(TrainConfig::from_pairs(&map, &[]).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = TrainConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("lambda", "x"), Err(Error::Config(_))));
        assert!(matches!(c.set("variant", "both"), Err(Error::Config(ref m)) if m.contains("uni-l2r")));
        assert!(c.apply_text("lambda 3").is_err());
    }

    #[test]
    fn validation_catches_bad_settings() {
        let mut c = TrainConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.attention.small_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.attn_dim = 7;
        assert!(c.validate().is_err());
    }
}
