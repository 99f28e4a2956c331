//! Full detector: image encoder with adapters, prompt learner and the
//! selected supervision head.

use numcore::nn::Linear;
use numcore::{NumError, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderOutput, ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::faa::{AdapterConfig, ForgeryAwareAdapter, Interaction};
use crate::lga::{self, LossForm, LossMode};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Fixed,
    Auto,
}

/// What the patch-based enhancer attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    Cls,
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: ImageEncoderConfig,
    pub use_adapters: bool,
    pub image_branch: bool,
    pub freq_branch: bool,
    pub interaction: Interaction,
    pub kernel_size: usize,
    pub text_layers: usize,
    pub contexts: usize,
    pub prompt_mode: PromptMode,
    pub condition_mode: ConditionMode,
    pub loss_mode: LossMode,
    pub loss_form: LossForm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: ImageEncoderConfig::default(),
            use_adapters: true,
            image_branch: true,
            freq_branch: true,
            interaction: Interaction::Both,
            kernel_size: 1,
            text_layers: 2,
            contexts: 8,
            prompt_mode: PromptMode::Auto,
            condition_mode: ConditionMode::Patch,
            loss_mode: LossMode::AugmentedContrastive,
            loss_form: LossForm::Bce,
        }
    }
}

impl ModelConfig {
    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            dim: self.encoder.embed_dim,
            heads: self.encoder.heads,
            kernel_size: self.kernel_size,
            image_branch: self.image_branch,
            freq_branch: self.freq_branch,
            interaction: self.interaction,
        }
    }

    pub fn text_config(&self) -> TextEncoderConfig {
        TextEncoderConfig {
            embed_dim: self.encoder.embed_dim,
            heads: self.encoder.heads,
            layers: self.text_layers,
            contexts: self.contexts,
            mlp_ratio: self.encoder.mlp_ratio,
            fixed_context: self.prompt_mode == PromptMode::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.use_adapters {
            self.adapter_config().validate()?;
        }
        Ok(())
    }
}

/// Tape values of one forward pass. `probs` is `[B×2]`; the similarity
/// entries are absent in linear-probe mode.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    pub probs: Var,
    pub s: Option<Var>,
    pub s_prime: Option<Var>,
    pub enhanced_ctx: Option<Var>,
    pub text: Option<Var>,
    pub aligned: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct FatFormer {
    pub config: ModelConfig,
    pub encoder: ImageEncoder,
    pub adapters: Vec<ForgeryAwareAdapter>,
    pub text: Option<TextEncoder>,
    pub probe: Option<Linear>,
    pub tau: Option<ParamId>,
}

impl FatFormer {
    /// Builds the model and its parameters from a seed. Parameters are drawn
    /// in a fixed order, so the same seed gives the same values in either precision.
    pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ImageEncoder::new(&mut store, &config.encoder, &mut rng)?;
        let adapters = if config.use_adapters {
            let ac = config.adapter_config();
            (0..config.encoder.stages - 1)
                .map(|j| ForgeryAwareAdapter::new(&mut store, &format!("adapter{j}"), &ac, &mut rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let (text, probe, tau) = match config.loss_mode {
            LossMode::LinearProbe => {
                let d = config.encoder.embed_dim;
                (None, Some(Linear::new(&mut store, "probe", d, 1, &mut rng)?), None)
            }
            _ => {
                let text = TextEncoder::new(&mut store, &config.text_config(), &mut rng)?;
                let tau = store.insert("tau", Tensor::scalar(T::of(TAU_INIT)).with_grad())?;
                (Some(text), None, Some(tau))
            }
        };
        Ok((
            FatFormer {
                config: config.clone(),
                encoder,
                adapters,
                text,
                probe,
                tau,
            },
            store,
        ))
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, images: &Tensor<T>) -> Result<EncoderOutput> {
        let adapters = (!self.adapters.is_empty()).then_some(self.adapters.as_slice());
        self.encoder.run(tape, images, adapters)
    }

    /// Class probabilities for a batch `[B×3×H×W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, images: &Tensor<T>) -> Result<ForwardOutput> {
        let enc = self.encode(tape, images)?;
        if let Some(probe) = &self.probe {
            let z = probe.forward(tape, enc.cls)?;
            let probs = lga::probe_probability(tape, z)?;
            return Ok(ForwardOutput {
                encoder: enc,
                probs,
                s: None,
                s_prime: None,
                enhanced_ctx: None,
                text: None,
                aligned: None,
            });
        }
        let text_enc = self
            .text
            .as_ref()
            .ok_or_else(|| NumError::Config("model has no text encoder".into()))?;
        let b = tape.shape(enc.cls)[0];
        let d = self.config.encoder.embed_dim;
        let ctx = text_enc.context(tape)?;
        let ctx = tape.reshape(ctx, &[self.config.contexts * d])?;
        let ctx = tape.repeat(ctx, b)?;
        let ctx = tape.reshape(ctx, &[b, self.config.contexts, d])?;
        // A single CLS key gives the same result as N broadcast copies of it.
        let cond = match self.config.condition_mode {
            ConditionMode::Patch => enc.patches,
            ConditionMode::Cls => tape.reshape(enc.cls, &[b, 1, d])?,
        };
        let enhanced = lga::patch_based_enhance(tape, ctx, cond)?;
        let text = text_enc.run(tape, Some(enhanced))?;
        let s = lga::similarity_cls(tape, enc.cls, text)?;
        let tau = tape.param(self.tau.expect("contrastive model has a temperature"));
        let (probs, s_prime, aligned) = match self.config.loss_mode {
            LossMode::AugmentedContrastive => {
                let aligned = lga::text_guided_interact(tape, enc.patches, text)?;
                let sp = lga::similarity_patches(tape, aligned, text)?;
                (
                    lga::augmented_probability(tape, s, Some(sp), tau)?,
                    Some(sp),
                    Some(aligned),
                )
            }
            _ => (lga::augmented_probability(tape, s, None, tau)?, None, None),
        };
        Ok(ForwardOutput {
            encoder: enc,
            probs,
            s: Some(s),
            s_prime,
            enhanced_ctx: Some(enhanced),
            text: Some(text),
            aligned,
        })
    }

    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        images: &Tensor<T>,
        labels: &[u8],
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(tape, images)?;
        let l = lga::loss(tape, out.probs, labels, self.config.loss_form)?;
        Ok((l, out))
    }

    /// Keeps the temperature inside its allowed range after an update.
    pub fn clamp_tau<T: Scalar>(&self, store: &mut ParamStore<T>) {
        if let Some(id) = self.tau {
            let v = &mut store.get_mut(id).data_mut()[0];
            *v = v.max(T::of(TAU_MIN)).min(T::of(TAU_MAX));
        }
    }

    /// `P̂(fake)` for every image of a batch, without recording gradients.
    pub fn fake_probabilities<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(store);
        let out = self.forward(&mut tape, images)?;
        Ok(tape.value(out.probs).chunks(2).map(|p| p[1].as_f64()).collect())
    }
}
