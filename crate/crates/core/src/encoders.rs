//! Toy ViT image encoder split into stages with adapter hooks between them,
//! and a small bidirectional text transformer pooled at the EOS position.

use numcore::nn::{LayerNorm, Linear, MultiHeadAttention};
use numcore::{NumError, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::faa::ForgeryAwareAdapter;

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub stages: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            layers: 8,
            stages: 4,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NumError::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.grid_side().is_multiple_of(2) {
            return fail(format!("token grid side {} is odd", self.grid_side()));
        }
        if self.stages == 0 || !self.layers.is_multiple_of(self.stages) {
            return fail(format!(
                "{} layers do not split into {} stages",
                self.layers, self.stages
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn layers_per_stage(&self) -> usize {
        self.layers / self.stages
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))` with GELU.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let h = self.attn.forward(tape, h, h, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Adds a learned `[L×D]` table to every item of `x[B×L×D]`.
fn add_positions<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, pos: ParamId) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.param(pos);
    let p = tape.reshape(p, &[s[1] * s[2]])?;
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    let y = tape.add_bias(flat, p)?;
    tape.reshape(y, &s)
}

/// Rearranges images `[B×3×H×W]` into rows of flattened `P×P` patches `[B×N×3P²]`,
/// patches in raster order, each ordered (channel, row, column).
pub fn patchify<T: Scalar>(images: &[T], batch: usize, size: usize, patch: usize) -> Vec<T> {
    let side = size / patch;
    let pd = 3 * patch * patch;
    let mut out = vec![T::zero(); batch * side * side * pd];
    for b in 0..batch {
        let img = &images[b * 3 * size * size..(b + 1) * 3 * size * size];
        for gy in 0..side {
            for gx in 0..side {
                let row = &mut out[((b * side + gy) * side + gx) * pd..][..pd];
                let mut k = 0;
                for c in 0..3 {
                    for py in 0..patch {
                        let src = &img[(c * size + gy * patch + py) * size + gx * patch..][..patch];
                        row[k..k + patch].copy_from_slice(src);
                        k += patch;
                    }
                }
            }
        }
    }
    out
}

/// Features of one encoder pass. Shapes carry a leading batch axis:
/// `cls [B×D]`, `patches [B×N×D]`, stage features `[B×(1+N)×D]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub cls: Var,
    pub patches: Var,
    pub per_stage_features: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
}

impl ImageEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &ImageEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch = Linear::new(store, "image.patch", config.patch_dim(), d, rng)?;
        let cls = store.insert("image.cls", Tensor::randn(&[d], EMBED_STD, rng).with_grad())?;
        let pos = store.insert(
            "image.pos",
            Tensor::randn(&[1 + config.num_patches(), d], EMBED_STD, rng).with_grad(),
        )?;
        let ln_pre = LayerNorm::new(store, "image.ln_pre", d)?;
        let blocks = (0..config.layers)
            .map(|l| {
                TransformerBlock::new(
                    store,
                    &format!("image.block{l}"),
                    d,
                    config.heads,
                    d * config.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let ln_post = LayerNorm::new(store, "image.ln_post", d)?;
        Ok(ImageEncoder {
            config: config.clone(),
            patch,
            cls,
            pos,
            ln_pre,
            blocks,
            ln_post,
        })
    }

    fn batch_of<T: Scalar>(&self, images: &Tensor<T>) -> Result<usize> {
        let s = images.shape();
        let h = self.config.image_size;
        match s {
            [3, a, b] if *a == h && *b == h => Ok(1),
            [n, 3, a, b] if *a == h && *b == h => Ok(*n),
            _ => Err(NumError::Shape {
                op: "patch_embed",
                detail: format!("expected [B, 3, {h}, {h}] or [3, {h}, {h}], got {s:?}"),
            }),
        }
    }

    /// Tokens `[B×(1+N)×D]`: CLS first, then projected patches, plus positions.
    pub fn patch_embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, images: &Tensor<T>) -> Result<Var> {
        let b = self.batch_of(images)?;
        let c = &self.config;
        let n = c.num_patches();
        let d = c.embed_dim;
        let rows = patchify(images.data(), b, c.image_size, c.patch_size);
        let rows = tape.constant(&[b, n, c.patch_dim()], rows)?;
        let tokens = self.patch.forward(tape, rows)?;
        let cls = tape.param(self.cls);
        let cls = tape.reshape(cls, &[1, d])?;
        let cls = tape.repeat(cls, b)?;
        let x = tape.concat(&[cls, tokens], 1)?;
        add_positions(tape, x, self.pos)
    }

    /// Runs all stages. When `adapters` is given, adapter `j` maps the patch
    /// grid between stage `j` and `j+1`; the CLS token bypasses it.
    pub fn run<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        images: &Tensor<T>,
        adapters: Option<&[ForgeryAwareAdapter]>,
    ) -> Result<EncoderOutput> {
        let c = &self.config;
        if let Some(a) = adapters {
            if a.len() + 1 != c.stages {
                return Err(NumError::Config(format!(
                    "{} adapters for {} stages; expected {}",
                    a.len(),
                    c.stages,
                    c.stages - 1
                )));
            }
        }
        let (n, d, side) = (c.num_patches(), c.embed_dim, c.grid_side());
        let x = self.patch_embed(tape, images)?;
        let mut x = self.ln_pre.forward(tape, x)?;
        let b = tape.shape(x)[0];
        let mut per_stage_features = Vec::with_capacity(c.stages);
        for (s, stage) in self.blocks.chunks(c.layers_per_stage()).enumerate() {
            for block in stage {
                x = block.forward(tape, x)?;
            }
            per_stage_features.push(x);
            if let Some(adapter) = adapters.and_then(|a| a.get(s)) {
                let cls = tape.slice(x, 1, 0, 1)?;
                let grid = tape.slice(x, 1, 1, n)?;
                let grid = tape.reshape(grid, &[b, side, side, d])?;
                let g = adapter.forward(tape, grid)?;
                let g = tape.reshape(g, &[b, n, d])?;
                x = tape.concat(&[cls, g], 1)?;
            }
        }
        let x = self.ln_post.forward(tape, x)?;
        let cls = tape.slice(x, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[b, d])?;
        let patches = tape.slice(x, 1, 1, n)?;
        Ok(EncoderOutput {
            cls,
            patches,
            per_stage_features,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub contexts: usize,
    pub mlp_ratio: usize,
    /// Freezes the context embeddings at their initial values.
    pub fixed_context: bool,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            embed_dim: 64,
            heads: 4,
            layers: 2,
            contexts: 8,
            mlp_ratio: 2,
            fixed_context: false,
        }
    }
}

pub const NUM_CLASSES: usize = 2;

/// Learned prompt pieces: `C` context vectors, one embedding per class, the EOS
/// embedding and positions for the `C+2` tokens of every prompt.
#[derive(Clone, Debug)]
pub struct TextPromptSet {
    pub ctx: ParamId,
    pub classes: ParamId,
    pub eos: ParamId,
    pub pos: ParamId,
    pub contexts: usize,
}

impl TextPromptSet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &TextEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.contexts == 0 {
            return Err(NumError::Config("at least one context embedding is required".into()));
        }
        let d = config.embed_dim;
        let mut ctx = Tensor::randn(&[config.contexts, d], EMBED_STD, rng);
        ctx.requires_grad = !config.fixed_context;
        Ok(TextPromptSet {
            ctx: store.insert("text.ctx", ctx)?,
            classes: store.insert(
                "text.classes",
                Tensor::randn(&[NUM_CLASSES, d], EMBED_STD, rng).with_grad(),
            )?,
            eos: store.insert("text.eos", Tensor::randn(&[d], EMBED_STD, rng).with_grad())?,
            pos: store.insert(
                "text.pos",
                Tensor::randn(&[config.contexts + 2, d], EMBED_STD, rng).with_grad(),
            )?,
            contexts: config.contexts,
        })
    }

    pub fn sequence_len(&self) -> usize {
        self.contexts + 2
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub prompts: TextPromptSet,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &TextEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || !config.embed_dim.is_multiple_of(config.heads) {
            return Err(NumError::Config(format!(
                "text dim {} not divisible by {} heads",
                config.embed_dim, config.heads
            )));
        }
        let prompts = TextPromptSet::new(store, config, rng)?;
        let d = config.embed_dim;
        let blocks = (0..config.layers)
            .map(|l| {
                TransformerBlock::new(
                    store,
                    &format!("text.block{l}"),
                    d,
                    config.heads,
                    d * config.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let ln_final = LayerNorm::new(store, "text.ln_final", d)?;
        Ok(TextEncoder {
            config: config.clone(),
            prompts,
            blocks,
            ln_final,
        })
    }

    /// The raw context embeddings as a `[1×C×D]` batch.
    pub fn context<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        let ctx = tape.param(self.prompts.ctx);
        tape.reshape(ctx, &[1, self.prompts.contexts, self.config.embed_dim])
    }

    /// Prompt embeddings `[B×M×D]`, one row per class, from context `[B×C×D]`
    /// (the learned context for a single prompt set when `enhanced_ctx` is `None`).
    pub fn run<T: Scalar>(&self, tape: &mut Tape<'_, T>, enhanced_ctx: Option<Var>) -> Result<Var> {
        let (c, d) = (self.prompts.contexts, self.config.embed_dim);
        let ctx = match enhanced_ctx {
            Some(v) => v,
            None => self.context(tape)?,
        };
        let s = tape.shape(ctx).to_vec();
        if s.len() != 3 || s[1] != c || s[2] != d {
            return Err(NumError::Shape {
                op: "text_encoder",
                detail: format!("context {s:?}, expected [B, {c}, {d}]"),
            });
        }
        let b = s[0];
        let m = NUM_CLASSES;
        let ctx = tape.reshape(ctx, &[b, 1, c, d])?;
        let ctx = tape.concat(&vec![ctx; m], 1)?;
        let classes = tape.param(self.prompts.classes);
        let classes = tape.reshape(classes, &[m, 1, d])?;
        let classes = tape.repeat(classes, b)?;
        let eos = tape.param(self.prompts.eos);
        let eos = tape.reshape(eos, &[1, d])?;
        let eos = tape.repeat(eos, b * m)?;
        let eos = tape.reshape(eos, &[b, m, 1, d])?;
        let seq = tape.concat(&[ctx, classes, eos], 2)?;
        let l = c + 2;
        let seq = tape.reshape(seq, &[b * m, l, d])?;
        let mut x = add_positions(tape, seq, self.prompts.pos)?;
        for block in &self.blocks {
            x = block.forward(tape, x)?;
        }
        let x = tape.slice(x, 1, l - 1, 1)?;
        let x = self.ln_final.forward(tape, x)?;
        tape.reshape(x, &[b, m, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_has_64_patches() {
        let c = ImageEncoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.layers_per_stage(), 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ImageEncoderConfig {
                patch_size: 5,
                ..Default::default()
            },
            ImageEncoderConfig {
                image_size: 12,
                ..Default::default()
            },
            ImageEncoderConfig {
                stages: 3,
                ..Default::default()
            },
            ImageEncoderConfig {
                heads: 5,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(NumError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn patchify_orders_channel_row_column() {
        let img: Vec<f64> = (0..3 * 4 * 4).map(|i| i as f64).collect();
        let p = patchify(&img, 1, 4, 2);
        // second patch in raster order starts at column 2 of channel 0
        assert_eq!(&p[12..16], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p[16..18], &[18.0, 19.0]);
    }

    #[test]
    fn text_encoder_gives_one_row_per_class() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TextEncoderConfig {
            embed_dim: 8,
            heads: 2,
            contexts: 3,
            ..Default::default()
        };
        let enc = TextEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mut tape = Tape::with_params(&store);
        let f = enc.run(&mut tape, None).unwrap();
        assert_eq!(tape.shape(f), &[1, 2, 8]);
        let v = tape.value(f);
        let diff: f64 = (0..8).map(|i| (v[i] - v[8 + i]).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn fixed_context_is_frozen() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TextEncoderConfig {
            fixed_context: true,
            ..Default::default()
        };
        let enc = TextEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        assert!(!store.get(enc.prompts.ctx).requires_grad);
        assert!(store.get(enc.prompts.classes).requires_grad);
    }
}
