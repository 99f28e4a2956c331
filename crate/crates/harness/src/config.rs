use fatformer::{ConditionMode, ImageEncoderConfig, Interaction, LossForm, LossMode, ModelConfig, PromptMode};
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

/// Layers in every encoder stage; the adapter count sets the number of stages.
pub const LAYERS_PER_STAGE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Largest joint gradient norm passed to the optimizer; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub augment: bool,
    pub image_branch: bool,
    pub freq_branch: bool,
    pub interaction: Interaction,
    pub prompt_mode: PromptMode,
    pub condition_mode: ConditionMode,
    pub loss_mode: LossMode,
    pub loss_form: LossForm,
    /// Zero disables the adapters.
    pub adapters: usize,
    pub contexts: usize,
    pub kernel_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 25,
            batch_size: 32,
            lr_decay: 0.9,
            decay_every: 10,
            grad_clip: 1.0,
            seed: 0,
            augment: true,
            image_branch: true,
            freq_branch: true,
            interaction: Interaction::Both,
            prompt_mode: PromptMode::Auto,
            condition_mode: ConditionMode::Patch,
            loss_mode: LossMode::AugmentedContrastive,
            loss_form: LossForm::Bce,
            adapters: 3,
            contexts: 8,
            kernel_size: 1,
        }
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(value))
        .map_err(|e| HarnessError::Config(format!("{key}={value}: {e}")))
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}={value} is not a valid value")))
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are plain values")
    }

    /// Applies one `KEY=VALUE` override, using the config field names.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "lr" => self.lr = parse_value(k, v)?,
            "beta1" => self.beta1 = parse_value(k, v)?,
            "beta2" => self.beta2 = parse_value(k, v)?,
            "epochs" => self.epochs = parse_value(k, v)?,
            "batch_size" => self.batch_size = parse_value(k, v)?,
            "lr_decay" => self.lr_decay = parse_value(k, v)?,
            "decay_every" => self.decay_every = parse_value(k, v)?,
            "grad_clip" => self.grad_clip = parse_value(k, v)?,
            "seed" => self.seed = parse_value(k, v)?,
            "augment" => self.augment = parse_value(k, v)?,
            "image_branch" => self.image_branch = parse_value(k, v)?,
            "freq_branch" => self.freq_branch = parse_value(k, v)?,
            "interaction" => self.interaction = parse_enum(k, v)?,
            "prompt_mode" => self.prompt_mode = parse_enum(k, v)?,
            "condition_mode" => self.condition_mode = parse_enum(k, v)?,
            "loss_mode" => self.loss_mode = parse_enum(k, v)?,
            "loss_form" => self.loss_form = parse_enum(k, v)?,
            "adapters" => self.adapters = parse_value(k, v)?,
            "contexts" => self.contexts = parse_value(k, v)?,
            "kernel_size" => self.kernel_size = parse_value(k, v)?,
            _ => return Err(HarnessError::Config(format!("unknown config key {k:?}"))),
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("gradient clip {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {})", self.beta1, self.beta2));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return bad("batch size and decay period must be positive".into());
        }
        if self.contexts == 0 {
            return bad("at least one context embedding is required".into());
        }
        self.model_config().validate()?;
        Ok(())
    }

    /// Learning rate in force during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn model_config(&self) -> ModelConfig {
        // without adapters the depth of the default model is kept
        let stages = if self.adapters == 0 { 4 } else { self.adapters + 1 };
        ModelConfig {
            encoder: ImageEncoderConfig {
                layers: stages * LAYERS_PER_STAGE,
                stages,
                ..Default::default()
            },
            use_adapters: self.adapters > 0,
            image_branch: self.image_branch,
            freq_branch: self.freq_branch,
            interaction: self.interaction,
            kernel_size: self.kernel_size,
            contexts: self.contexts,
            prompt_mode: self.prompt_mode,
            condition_mode: self.condition_mode,
            loss_mode: self.loss_mode,
            loss_form: self.loss_form,
            ..Default::default()
        }
    }

    /// Content hash of the canonical TOML form.
    pub fn fingerprint(&self) -> String {
        datagen::io::content_hash(self.to_toml().as_bytes())
    }
}
