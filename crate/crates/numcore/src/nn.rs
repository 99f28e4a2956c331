//! Parameterized building blocks recorded on a [`Tape`].

use rand::Rng;

use crate::error::{NumError, Result};
use crate::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Affine map over the last axis: `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/√d_in`, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Tensor::uniform(&[d_in, d_out], bound, rng).with_grad();
        Self::from_weight(store, name, w)
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::from_weight(store, name, Tensor::zeros(&[d_in, d_out]).with_grad())
    }

    pub fn from_weight<T: Scalar>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>) -> Result<Self> {
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]).with_grad())?;
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(&[dim], T::one()).with_grad())?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]).with_grad())?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with learned q/k/v/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of an attention call together with its weights `[B·heads, Lq, Lk]`.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(store, name, dim, heads, false, rng)
    }

    /// Same as [`MultiHeadAttention::new`] but with a zero output projection,
    /// so a residual block built on it starts as the identity.
    pub fn zero_output<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(store, name, dim, heads, true, rng)
    }

    fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        zero_out: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NumError::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        let q = Linear::new(store, &format!("{name}.q"), dim, dim, rng)?;
        let k = Linear::new(store, &format!("{name}.k"), dim, dim, rng)?;
        let v = Linear::new(store, &format!("{name}.v"), dim, dim, rng)?;
        let out = if zero_out {
            Linear::zeros(store, &format!("{name}.out"), dim, dim)?
        } else {
            Linear::new(store, &format!("{name}.out"), dim, dim, rng)?
        };
        Ok(MultiHeadAttention {
            q,
            k,
            v,
            out,
            heads,
            dim,
        })
    }

    fn split_heads<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, b: usize, l: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = tape.reshape(x, &[b, l, self.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * self.heads, l, dh])
    }

    /// Attention of queries `q` over keys `k` and values `v`, each `[L×D]` or `[B×L×D]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, q, k, v)?.output)
    }

    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<AttentionOutput> {
        let sq = tape.shape(q).to_vec();
        let sk = tape.shape(k).to_vec();
        let batched = sq.len() == 3;
        let (b, lq, lk) = match (sq.len(), sk.len()) {
            (2, 2) => (1, sq[0], sk[0]),
            (3, 3) if sq[0] == sk[0] => (sq[0], sq[1], sk[1]),
            _ => {
                return Err(NumError::Shape {
                    op: "attention",
                    detail: format!("query {sq:?} vs key {sk:?}"),
                })
            }
        };
        if *sq.last().unwrap() != self.dim || tape.shape(v) != sk.as_slice() {
            return Err(NumError::Shape {
                op: "attention",
                detail: format!("query {sq:?}, key {sk:?}, value {:?}, dim {}", tape.shape(v), self.dim),
            });
        }
        let dh = self.dim / self.heads;
        let qp = self.q.forward(tape, q)?;
        let kp = self.k.forward(tape, k)?;
        let vp = self.v.forward(tape, v)?;
        let qh = self.split_heads(tape, qp, b, lq)?;
        let kh = self.split_heads(tape, kp, b, lk)?;
        let vh = self.split_heads(tape, vp, b, lk)?;
        let scores = tape.bmm(qh, kh, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax(scores, 2, 1.0)?;
        let ctx = tape.bmm(weights, vh, false)?;
        let ctx = tape.reshape(ctx, &[b, self.heads, lq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let shape: Vec<usize> = if batched {
            vec![b, lq, self.dim]
        } else {
            vec![lq, self.dim]
        };
        let ctx = tape.reshape(ctx, &shape)?;
        let output = self.out.forward(tape, ctx)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(NumError::Shape {
            op: "cosine",
            detail: format!("{:?} vs {:?}", u.shape(), v.shape()),
        });
    }
    let mut tape = Tape::new();
    let a = tape.constant(&[1, u.len()], u.data().to_vec())?;
    let b = tape.constant(&[1, v.len()], v.data().to_vec())?;
    let c = tape.cosine_matrix(a, b)?;
    Ok(tape.item(c).as_f64())
}
