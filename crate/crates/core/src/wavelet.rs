//! Single-level orthonormal Haar transform over `[h×w×D]` token grids.
//!
//! For each 2×2 block `[a b; c d]` and channel:
//! `LL = (a+b+c+d)/2`, `LH = (a−b+c−d)/2`, `HL = (a+b−c−d)/2`, `HH = (a−b−c+d)/2`.
//! LH responds to horizontal change (along `w`), HL to vertical change (along `h`).
//! The transform matrix is orthogonal and symmetric, so it is its own inverse.

use numcore::{CustomCtx, CustomOp, NumError, Result, Scalar, Tape, Tensor, Var};

/// The four sub-bands of a grid, each `[(h/2)×(w/2)×D]` in spatial order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyBands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    pub source_height: usize,
    pub source_width: usize,
}

impl<T: Scalar> FrequencyBands<T> {
    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| b.sq_norm()).sum()
    }

    /// `‖LH‖²+‖HL‖²+‖HH‖²` over the total energy.
    pub fn high_frequency_fraction(&self) -> f64 {
        let total = self.energy();
        if total == 0.0 {
            return 0.0;
        }
        (self.lh.sq_norm() + self.hl.sq_norm() + self.hh.sq_norm()) / total
    }

    pub fn hh_fraction(&self) -> f64 {
        let total = self.energy();
        if total == 0.0 {
            return 0.0;
        }
        self.hh.sq_norm() / total
    }
}

fn check_grid(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(NumError::Shape {
            op,
            detail: format!("grid {h}×{w} has an odd side"),
        });
    }
    Ok(())
}

/// Analysis of `batch` grids `[h×w×d]` into `[batch×4×(h/2·w/2)×d]`, band order LL, LH, HL, HH.
pub fn haar_forward<T: Scalar>(x: &[T], batch: usize, h: usize, w: usize, d: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let p = h2 * w2;
    let half = T::of(0.5);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x[b * h * w * d..(b + 1) * h * w * d];
        let dst = &mut out[b * 4 * p * d..(b + 1) * 4 * p * d];
        for i in 0..h2 {
            for j in 0..w2 {
                let pos = i * w2 + j;
                let r0 = ((2 * i) * w + 2 * j) * d;
                let r1 = ((2 * i + 1) * w + 2 * j) * d;
                for c in 0..d {
                    let (ta, tb) = (src[r0 + c], src[r0 + d + c]);
                    let (tc, td) = (src[r1 + c], src[r1 + d + c]);
                    dst[pos * d + c] = (ta + tb + tc + td) * half;
                    dst[(p + pos) * d + c] = (ta - tb + tc - td) * half;
                    dst[(2 * p + pos) * d + c] = (ta + tb - tc - td) * half;
                    dst[(3 * p + pos) * d + c] = (ta - tb - tc + td) * half;
                }
            }
        }
    }
    out
}

/// Synthesis, the exact inverse of [`haar_forward`].
pub fn haar_inverse<T: Scalar>(bands: &[T], batch: usize, h: usize, w: usize, d: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let p = h2 * w2;
    let half = T::of(0.5);
    let mut out = vec![T::zero(); bands.len()];
    for b in 0..batch {
        let src = &bands[b * 4 * p * d..(b + 1) * 4 * p * d];
        let dst = &mut out[b * h * w * d..(b + 1) * h * w * d];
        for i in 0..h2 {
            for j in 0..w2 {
                let pos = i * w2 + j;
                let r0 = ((2 * i) * w + 2 * j) * d;
                let r1 = ((2 * i + 1) * w + 2 * j) * d;
                for c in 0..d {
                    let ll = src[pos * d + c];
                    let lh = src[(p + pos) * d + c];
                    let hl = src[(2 * p + pos) * d + c];
                    let hh = src[(3 * p + pos) * d + c];
                    dst[r0 + c] = (ll + lh + hl + hh) * half;
                    dst[r0 + d + c] = (ll - lh + hl - hh) * half;
                    dst[r1 + c] = (ll + lh - hl - hh) * half;
                    dst[r1 + d + c] = (ll - lh - hl + hh) * half;
                }
            }
        }
    }
    out
}

pub fn dwt2d<T: Scalar>(x: &Tensor<T>) -> Result<FrequencyBands<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(NumError::Shape {
            op: "dwt2d",
            detail: format!("expected [h, w, D], got {s:?}"),
        });
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    check_grid("dwt2d", h, w)?;
    let out = haar_forward(x.data(), 1, h, w, d);
    let n = out.len() / 4;
    let band = |k: usize| Tensor::new(&[h / 2, w / 2, d], out[k * n..(k + 1) * n].to_vec());
    Ok(FrequencyBands {
        ll: band(0)?,
        lh: band(1)?,
        hl: band(2)?,
        hh: band(3)?,
        source_height: h,
        source_width: w,
    })
}

pub fn idwt2d<T: Scalar>(bands: &FrequencyBands<T>) -> Result<Tensor<T>> {
    let (h, w) = (bands.source_height, bands.source_width);
    check_grid("idwt2d", h, w)?;
    let shape = bands.ll.shape();
    if shape.len() != 3 || shape[0] * 2 != h || shape[1] * 2 != w {
        return Err(NumError::Shape {
            op: "idwt2d",
            detail: format!("band {shape:?} does not tile a {h}×{w} grid"),
        });
    }
    if bands.bands().iter().any(|b| b.shape() != shape) {
        return Err(NumError::Shape {
            op: "idwt2d",
            detail: format!(
                "band shapes disagree: {:?}",
                bands.bands().iter().map(|b| b.shape().to_vec()).collect::<Vec<_>>()
            ),
        });
    }
    let d = shape[2];
    let mut packed = Vec::with_capacity(4 * bands.ll.len());
    for b in bands.bands() {
        packed.extend_from_slice(b.data());
    }
    Tensor::new(&[h, w, d], haar_inverse(&packed, 1, h, w, d))
}

struct HaarOp {
    inverse: bool,
    batch: usize,
    h: usize,
    w: usize,
    d: usize,
}

impl<T: Scalar> CustomOp<T> for HaarOp {
    fn name(&self) -> &'static str {
        if self.inverse {
            "idwt"
        } else {
            "dwt"
        }
    }

    fn backward(&self, _ctx: &CustomCtx<'_, T>, grad_out: &[T], _input: usize, grad_in: &mut [T]) {
        // The adjoint of an orthogonal map is its inverse.
        let g = if self.inverse {
            haar_forward(grad_out, self.batch, self.h, self.w, self.d)
        } else {
            haar_inverse(grad_out, self.batch, self.h, self.w, self.d)
        };
        for (a, b) in grad_in.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Differentiable analysis of `x[B×h×w×D]` into bands `[B×4×(h/2·w/2)×D]`.
pub fn dwt<T: Scalar>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(NumError::Shape {
            op: "dwt",
            detail: format!("expected [B, h, w, D], got {s:?}"),
        });
    }
    let (batch, h, w, d) = (s[0], s[1], s[2], s[3]);
    check_grid("dwt", h, w)?;
    let out = haar_forward(tape.value(x), batch, h, w, d);
    tape.custom(
        &[x],
        out,
        &[batch, 4, (h / 2) * (w / 2), d],
        Box::new(HaarOp {
            inverse: false,
            batch,
            h,
            w,
            d,
        }),
    )
}

/// Differentiable synthesis of bands `[B×4×(h/2·w/2)×D]` back to `[B×h×w×D]`.
pub fn idwt<T: Scalar>(tape: &mut Tape<'_, T>, bands: Var, h: usize, w: usize) -> Result<Var> {
    check_grid("idwt", h, w)?;
    let s = tape.shape(bands).to_vec();
    if s.len() != 4 || s[1] != 4 || s[2] != (h / 2) * (w / 2) {
        return Err(NumError::Shape {
            op: "idwt",
            detail: format!("bands {s:?} do not tile a {h}×{w} grid"),
        });
    }
    let (batch, d) = (s[0], s[3]);
    let out = haar_inverse(tape.value(bands), batch, h, w, d);
    tape.custom(
        &[bands],
        out,
        &[batch, h, w, d],
        Box::new(HaarOp {
            inverse: true,
            batch,
            h,
            w,
            d,
        }),
    )
}
