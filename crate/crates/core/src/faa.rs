//! Forgery-aware adapter: an image-domain convolution branch and a wavelet-domain
//! attention branch, fused as `ĝ = ĝ_img + λ·ĝ_freq`.

use numcore::nn::{LayerNorm, Linear, MultiHeadAttention};
use numcore::{CustomCtx, CustomOp, NumError, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::wavelet::{dwt, idwt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    Inter,
    Intra,
    Both,
}

impl Interaction {
    pub fn inter(self) -> bool {
        matches!(self, Interaction::Inter | Interaction::Both)
    }

    pub fn intra(self) -> bool {
        matches!(self, Interaction::Intra | Interaction::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub dim: usize,
    pub heads: usize,
    pub kernel_size: usize,
    pub image_branch: bool,
    pub freq_branch: bool,
    pub interaction: Interaction,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            dim: 64,
            heads: 4,
            kernel_size: 1,
            image_branch: true,
            freq_branch: true,
            interaction: Interaction::Both,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.image_branch && !self.freq_branch {
            return Err(NumError::Config("adapter needs at least one branch".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(NumError::Config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(NumError::Config(format!(
                "adapter dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Gathers `k×k` zero-padded neighbourhoods of `x[B×h×w×C]` into `[B×h×w×(k·k·C)]`,
/// ordered (row offset, column offset, channel).
fn im2col_data<T: Scalar>(x: &[T], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let kc = k * k * c;
    let mut out = vec![T::zero(); b * h * w * kc];
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let dst = &mut out[((n * h + i) * w + j) * kc..][..kc];
                for dy in 0..k {
                    let y = i as isize + dy as isize - pad;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let xx = j as isize + dx as isize - pad;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let src = &x[((n * h + y as usize) * w + xx as usize) * c..][..c];
                        dst[(dy * k + dx) * c..][..c].copy_from_slice(src);
                    }
                }
            }
        }
    }
    out
}

struct Im2Col {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
}

impl<T: Scalar> CustomOp<T> for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn backward(&self, _ctx: &CustomCtx<'_, T>, grad_out: &[T], _input: usize, grad_in: &mut [T]) {
        let (b, h, w, c, k) = (self.b, self.h, self.w, self.c, self.k);
        let pad = (k / 2) as isize;
        let kc = k * k * c;
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let src = &grad_out[((n * h + i) * w + j) * kc..][..kc];
                    for dy in 0..k {
                        let y = i as isize + dy as isize - pad;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let xx = j as isize + dx as isize - pad;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let dst = &mut grad_in[((n * h + y as usize) * w + xx as usize) * c..][..c];
                            for (d, &g) in dst.iter_mut().zip(&src[(dy * k + dx) * c..][..c]) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded `k×k` convolution of `x[B×h×w×Cin]` with weight `[(k·k·Cin)×Cout]`.
pub fn conv2d<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, weight: Var, bias: Var, k: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(NumError::Shape {
            op: "conv2d",
            detail: format!("expected [B, h, w, C], got {s:?}"),
        });
    }
    let cols = if k == 1 {
        x
    } else {
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let data = im2col_data(tape.value(x), b, h, w, c, k);
        tape.custom(&[x], data, &[b, h, w, k * k * c], Box::new(Im2Col { b, h, w, c, k }))?
    };
    let y = tape.matmul(cols, weight)?;
    tape.add_bias(y, bias)
}

/// `Conv(ReLU(Conv(g)))` with a hidden width of `2D`.
///
/// At initialization the first kernel's centre tap is `[I, −I]` and the second's
/// is `[I; −I]`, so the branch computes `ReLU(g) − ReLU(−g) = g` for any `g`;
/// on nonnegative input the negative half is inactive and it reduces to a
/// plain identity pair.
#[derive(Clone, Debug)]
pub struct ImageBranch {
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
    pub kernel_size: usize,
}

impl ImageBranch {
    pub fn identity<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, kernel_size: usize) -> Result<Self> {
        let k = kernel_size;
        let hidden = 2 * dim;
        let centre = (k / 2) * k + k / 2;
        let mut w1 = Tensor::<T>::zeros(&[k * k * dim, hidden]);
        let mut w2 = Tensor::<T>::zeros(&[k * k * hidden, dim]);
        {
            let d1 = w1.data_mut();
            for i in 0..dim {
                let row = centre * dim + i;
                d1[row * hidden + i] = T::one();
                d1[row * hidden + dim + i] = -T::one();
            }
            let d2 = w2.data_mut();
            for i in 0..dim {
                d2[(centre * hidden + i) * dim + i] = T::one();
                d2[(centre * hidden + dim + i) * dim + i] = -T::one();
            }
        }
        Ok(ImageBranch {
            conv1_weight: store.insert(format!("{name}.conv1.weight"), w1.with_grad())?,
            conv1_bias: store.insert(format!("{name}.conv1.bias"), Tensor::zeros(&[hidden]).with_grad())?,
            conv2_weight: store.insert(format!("{name}.conv2.weight"), w2.with_grad())?,
            conv2_bias: store.insert(format!("{name}.conv2.bias"), Tensor::zeros(&[dim]).with_grad())?,
            kernel_size,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, g: Var) -> Result<Var> {
        let (w1, b1) = (tape.param(self.conv1_weight), tape.param(self.conv1_bias));
        let (w2, b2) = (tape.param(self.conv2_weight), tape.param(self.conv2_bias));
        let h = conv2d(tape, g, w1, b1, self.kernel_size)?;
        let h = tape.relu(h);
        conv2d(tape, h, w2, b2, self.kernel_size)
    }
}

/// DWT, then pre-norm residual inter-band attention, intra-band attention and
/// FFN over the band vectors, then IDWT. Every residual path ends in a zero
/// projection at initialization, so the branch starts as `idwt(dwt(g)) = g`.
#[derive(Clone, Debug)]
pub struct FreqBranch {
    pub inter_norm: LayerNorm,
    pub inter: MultiHeadAttention,
    pub intra_norm: LayerNorm,
    pub intra: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub interaction: Interaction,
}

impl FreqBranch {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &AdapterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.dim;
        Ok(FreqBranch {
            inter_norm: LayerNorm::new(store, &format!("{name}.inter_norm"), d)?,
            inter: MultiHeadAttention::zero_output(store, &format!("{name}.inter"), d, config.heads, rng)?,
            intra_norm: LayerNorm::new(store, &format!("{name}.intra_norm"), d)?,
            intra: MultiHeadAttention::zero_output(store, &format!("{name}.intra"), d, config.heads, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
            ffn1: Linear::new(store, &format!("{name}.ffn1"), d, 2 * d, rng)?,
            ffn2: Linear::zeros(store, &format!("{name}.ffn2"), 2 * d, d)?,
            interaction: config.interaction,
        })
    }

    /// Attention across the four bands at each position; `x` is `[B×4×P×D]`.
    pub fn inter_band<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, p, d) = (s[0], s[2], s[3]);
        let seq = tape.permute(x, &[0, 2, 1, 3])?;
        let seq = tape.reshape(seq, &[b * p, 4, d])?;
        let h = self.inter_norm.forward(tape, seq)?;
        let h = self.inter.forward(tape, h, h, h)?;
        let y = tape.add(seq, h)?;
        let y = tape.reshape(y, &[b, p, 4, d])?;
        tape.permute(y, &[0, 2, 1, 3])
    }

    /// Attention across positions within each band; `x` is `[B×4×P×D]`.
    pub fn intra_band<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let seq = tape.reshape(x, &[s[0] * 4, s[2], s[3]])?;
        let h = self.intra_norm.forward(tape, seq)?;
        let h = self.intra.forward(tape, h, h, h)?;
        let y = tape.add(seq, h)?;
        tape.reshape(y, &s)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, g: Var) -> Result<Var> {
        let s = tape.shape(g).to_vec();
        let mut x = dwt(tape, g)?;
        if self.interaction.inter() {
            x = self.inter_band(tape, x)?;
        }
        if self.interaction.intra() {
            x = self.intra_band(tape, x)?;
        }
        let h = self.ffn_norm.forward(tape, x)?;
        let h = self.ffn1.forward(tape, h)?;
        let h = tape.relu(h);
        let h = self.ffn2.forward(tape, h)?;
        let x = tape.add(x, h)?;
        idwt(tape, x, s[1], s[2])
    }
}

#[derive(Clone, Debug)]
pub struct ForgeryAwareAdapter {
    pub config: AdapterConfig,
    pub image: Option<ImageBranch>,
    pub freq: Option<FreqBranch>,
    /// Fusion scale, present with the frequency branch.
    pub lambda: Option<ParamId>,
}

impl ForgeryAwareAdapter {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &AdapterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let image = if config.image_branch {
            Some(ImageBranch::identity(
                store,
                &format!("{name}.image"),
                config.dim,
                config.kernel_size,
            )?)
        } else {
            None
        };
        let (freq, lambda) = if config.freq_branch {
            let f = FreqBranch::new(store, &format!("{name}.freq"), config, rng)?;
            let l = store.insert(format!("{name}.lambda"), Tensor::scalar(T::zero()).with_grad())?;
            (Some(f), Some(l))
        } else {
            (None, None)
        };
        Ok(ForgeryAwareAdapter {
            config: config.clone(),
            image,
            freq,
            lambda,
        })
    }

    /// Maps a patch grid `[B×h×w×D]` to a grid of the same shape.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, g: Var) -> Result<Var> {
        let img = match &self.image {
            Some(b) => Some(b.forward(tape, g)?),
            None => None,
        };
        let freq = match (&self.freq, self.lambda) {
            (Some(b), Some(l)) => {
                let f = b.forward(tape, g)?;
                Some((f, tape.param(l)))
            }
            _ => None,
        };
        match (img, freq) {
            (Some(i), Some((f, l))) => fuse(tape, i, f, l),
            (Some(i), None) => Ok(i),
            (None, Some((f, l))) => tape.mul_scalar(f, l),
            (None, None) => Err(NumError::Config("adapter has no active branch".into())),
        }
    }
}

/// `ĝ_img + λ·ĝ_freq`, with no skip of the raw input.
pub fn fuse<T: Scalar>(tape: &mut Tape<'_, T>, img: Var, freq: Var, lambda: Var) -> Result<Var> {
    if tape.shape(img) != tape.shape(freq) {
        return Err(NumError::Shape {
            op: "fuse",
            detail: format!("{:?} vs {:?}", tape.shape(img), tape.shape(freq)),
        });
    }
    let scaled = tape.mul_scalar(freq, lambda)?;
    tape.add(img, scaled)
}
