//! Run configuration: one flat struct, a `key = value` text format whose
//! keys are exactly the field names, and validation.

use crate::augment::AugmentConfig;
use crate::data::{LatentSpec, QUANTILE_BUCKETS};
use crate::error::{Error, Result};
use crate::losses::Weighting;
use crate::model::DimsConfig;
use std::path::Path;

/// Which loss families are active and how the towers are wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_contrastive: bool,
    pub use_inter: bool,
    pub use_intra: bool,
    pub share_pre_projectors: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.use_contrastive {
            return Err(Error::Config(
                "use_contrastive must be true: every configuration keeps the contrastive baseline"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Everything a training run depends on. Serialized as `key = value` lines;
/// every key is a field name below and vice versa.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    // optimizer and schedule
    pub lr: f64,
    pub warmup_iters: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    // method
    pub ema_beta: f64,
    pub tau: f64,
    pub learnable_tau: bool,
    pub weighting: Weighting,
    pub dims: String,
    // ablation wiring
    pub use_contrastive: bool,
    pub use_inter: bool,
    pub use_intra: bool,
    pub share_pre_projectors: bool,
    // loop
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    // synthetic corpus
    pub data_n: usize,
    pub latent_k: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub redundancy_rate: f64,
    pub looseness_rate: f64,
    // augmentation
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub token_mask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 3e-5,
            warmup_iters: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            weight_decay: 0.001,
            grad_clip: 0.0,
            ema_beta: 0.95,
            tau: 0.07,
            learnable_tau: false,
            weighting: Weighting::Fixed,
            dims: "desk".to_string(),
            use_contrastive: true,
            use_inter: true,
            use_intra: true,
            share_pre_projectors: true,
            batch_size: 32,
            total_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            data_n: 2048,
            latent_k: 8,
            classes: 8,
            noise_sigma: 0.05,
            redundancy_rate: 0.0,
            looseness_rate: 0.0,
            flip_prob: 0.5,
            jitter_strength: 0.1,
            token_mask_prob: 0.1,
        }
    }
}

trait ConfigValue: Sized {
    fn parse_cv(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! parsed_value {
    ($($ty:ty),+) => {
        $(impl ConfigValue for $ty {
            fn parse_cv(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                format!("{self}")
            }
        })+
    };
}
parsed_value!(f64, u64, usize, bool);

impl ConfigValue for String {
    fn parse_cv(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Weighting {
    fn parse_cv(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fixed" => Ok(Weighting::Fixed),
            "learnable" => Ok(Weighting::Learnable),
            other => Err(format!("expected 'fixed' or 'learnable', got '{other}'")),
        }
    }
    fn show(&self) -> String {
        match self {
            Weighting::Fixed => "fixed".to_string(),
            Weighting::Learnable => "learnable".to_string(),
        }
    }
}

/// Single source of truth for the field list; both the parser and the
/// serializer expand from it, so they cannot drift apart.
macro_rules! each_field {
    ($cb:ident) => {
        $cb!(lr);
        $cb!(warmup_iters);
        $cb!(adam_beta1);
        $cb!(adam_beta2);
        $cb!(adam_eps);
        $cb!(weight_decay);
        $cb!(grad_clip);
        $cb!(ema_beta);
        $cb!(tau);
        $cb!(learnable_tau);
        $cb!(weighting);
        $cb!(dims);
        $cb!(use_contrastive);
        $cb!(use_inter);
        $cb!(use_intra);
        $cb!(share_pre_projectors);
        $cb!(batch_size);
        $cb!(total_steps);
        $cb!(seed);
        $cb!(checkpoint_every);
        $cb!(data_n);
        $cb!(latent_k);
        $cb!(classes);
        $cb!(noise_sigma);
        $cb!(redundancy_rate);
        $cb!(looseness_rate);
        $cb!(flip_prob);
        $cb!(jitter_strength);
        $cb!(token_mask_prob);
    };
}

impl TrainConfig {
    /// Sets one field from its text form; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! try_set {
            ($f:ident) => {
                if key == stringify!($f) {
                    self.$f = ConfigValue::parse_cv(value)
                        .map_err(|e| Error::Config(format!("key '{key}': {e}")))?;
                    return Ok(());
                }
            };
        }
        each_field!(try_set);
        Err(Error::Config(format!("unknown config key '{key}'")))
    }

    /// Canonical text form: fixed field order, one `key = value` per line.
    /// `parse(serialize(c)) == c` bit-for-bit.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($f:ident) => {
                out.push_str(stringify!($f));
                out.push_str(" = ");
                out.push_str(&self.$f.show());
                out.push('\n');
            };
        }
        each_field!(emit);
        out
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// blank lines are ignored; later keys override earlier ones.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        TrainConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn ablation(&self) -> AblationFlags {
        AblationFlags {
            use_contrastive: self.use_contrastive,
            use_inter: self.use_inter,
            use_intra: self.use_intra,
            share_pre_projectors: self.share_pre_projectors,
        }
    }

    pub fn with_flags(&self, flags: AblationFlags) -> TrainConfig {
        TrainConfig {
            use_contrastive: flags.use_contrastive,
            use_inter: flags.use_inter,
            use_intra: flags.use_intra,
            share_pre_projectors: flags.share_pre_projectors,
            ..self.clone()
        }
    }

    pub fn latent_spec(&self) -> LatentSpec {
        LatentSpec {
            latent_k: self.latent_k,
            classes: self.classes,
            noise_sigma: self.noise_sigma,
            redundancy_rate: self.redundancy_rate,
            looseness_rate: self.looseness_rate,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.flip_prob,
            jitter_strength: self.jitter_strength,
            token_mask_prob: self.token_mask_prob,
        }
    }

    pub fn dims_config(&self) -> Result<DimsConfig> {
        DimsConfig::by_name(&self.dims)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return fail(format!("ema_beta must lie in [0, 1), got {}", self.ema_beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay and grad_clip must be non-negative".to_string());
        }
        self.ablation().validate()?;
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall { got: self.batch_size, min: 2 });
        }
        if self.data_n < self.batch_size {
            return fail(format!(
                "data_n ({}) must be at least batch_size ({})",
                self.data_n, self.batch_size
            ));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("token_mask_prob", self.token_mask_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return fail(format!(
                "jitter_strength must lie in [0, 1], got {}",
                self.jitter_strength
            ));
        }
        self.latent_spec().validate()?;
        let dims = self.dims_config()?;
        dims.validate()?;
        let vocab_needed = 2 + self.latent_k * 2 * QUANTILE_BUCKETS;
        if vocab_needed > dims.vocab_size {
            return fail(format!(
                "latent_k {} needs a vocab of {vocab_needed} but dims preset '{}' embeds {}",
                self.latent_k, self.dims, dims.vocab_size
            ));
        }
        Ok(())
    }
}
