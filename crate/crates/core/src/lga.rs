//! Language-guided alignment: patch-based enhancer, text-guided interactor,
//! CLS and patch similarities, the augmented probability and the loss.
//!
//! All functions take batched tape values; `B` is the batch axis.

use numcore::{NumError, Result, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    LinearProbe,
    #[serde(rename = "contra")]
    Contrastive,
    #[serde(rename = "aug_contra")]
    AugmentedContrastive,
}

/// How the two-class probability is turned into a per-sample loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `−log P̂(y) − (1−y)·log(1−P̂(y))`. Evaluated verbatim; at `y = 0` it is
    /// minimized by `P̂(0) = 0.5`, so it is not used for training by default.
    Literal,
    /// Binary cross-entropy on the fake-class probability:
    /// `−y·log P̂(1) − (1−y)·log P̂(0)`.
    Bce,
}

fn dims(tape: &Tape<'_, impl Scalar>, v: Var, op: &'static str, rank: usize) -> Result<Vec<usize>> {
    let s = tape.shape(v).to_vec();
    if s.len() != rank {
        return Err(NumError::Shape {
            op,
            detail: format!("expected rank {rank}, got {s:?}"),
        });
    }
    Ok(s)
}

/// `p̂_ctx = softmax(p_ctx · patchesᵀ, over N) · patches + p_ctx`.
/// `ctx [B×C×D]`, `patches [B×N×D]` → `[B×C×D]`.
pub fn patch_based_enhance<T: Scalar>(tape: &mut Tape<'_, T>, ctx: Var, patches: Var) -> Result<Var> {
    let sc = dims(tape, ctx, "patch_based_enhance", 3)?;
    let sp = dims(tape, patches, "patch_based_enhance", 3)?;
    if sc[0] != sp[0] || sc[2] != sp[2] {
        return Err(NumError::Shape {
            op: "patch_based_enhance",
            detail: format!("context {sc:?} vs patches {sp:?}"),
        });
    }
    let a = tape.bmm(ctx, patches, true)?;
    let w = tape.softmax(a, 2, 1.0)?;
    let mixed = tape.bmm(w, patches, false)?;
    tape.add(mixed, ctx)
}

/// `f̂ = softmax(patches · f_textᵀ, over M) · f_text + patches`.
/// `patches [B×N×D]`, `text [B×M×D]` → `[B×N×D]`.
pub fn text_guided_interact<T: Scalar>(tape: &mut Tape<'_, T>, patches: Var, text: Var) -> Result<Var> {
    let sp = dims(tape, patches, "text_guided_interact", 3)?;
    let st = dims(tape, text, "text_guided_interact", 3)?;
    if sp[0] != st[0] || sp[2] != st[2] {
        return Err(NumError::Shape {
            op: "text_guided_interact",
            detail: format!("patches {sp:?} vs text {st:?}"),
        });
    }
    let a = tape.bmm(patches, text, true)?;
    let w = tape.softmax(a, 2, 1.0)?;
    let mixed = tape.bmm(w, text, false)?;
    tape.add(mixed, patches)
}

/// Cosine similarity of every row of `a [B×L×D]` with every row of `text [B×M×D]`, `[B×L×M]`.
fn cosine_rows<T: Scalar>(tape: &mut Tape<'_, T>, a: Var, text: Var, op: &'static str) -> Result<Var> {
    let sa = tape.shape(a).to_vec();
    let st = dims(tape, text, op, 3)?;
    if sa[0] != st[0] || sa[2] != st[2] {
        return Err(NumError::Shape {
            op,
            detail: format!("{sa:?} vs text {st:?}"),
        });
    }
    let an = tape.normalize(a)?;
    let tn = tape.normalize(text)?;
    tape.bmm(an, tn, true)
}

/// `S(i) = cos(cls, f_text(i))`; `cls [B×D]`, `text [B×M×D]` → `[B×M]`.
pub fn similarity_cls<T: Scalar>(tape: &mut Tape<'_, T>, cls: Var, text: Var) -> Result<Var> {
    let s = dims(tape, cls, "similarity_cls", 2)?;
    let c = tape.reshape(cls, &[s[0], 1, s[1]])?;
    let sim = cosine_rows(tape, c, text, "similarity_cls")?;
    let m = tape.shape(text)[1];
    tape.reshape(sim, &[s[0], m])
}

/// `S′(i) = mean over patches of cos(f̂(t), f_text(i))`; `[B×N×D]`, `[B×M×D]` → `[B×M]`.
pub fn similarity_patches<T: Scalar>(tape: &mut Tape<'_, T>, aligned: Var, text: Var) -> Result<Var> {
    dims(tape, aligned, "similarity_patches", 3)?;
    let sim = cosine_rows(tape, aligned, text, "similarity_patches")?;
    tape.mean_axis(sim, 1)
}

/// `P̂ = softmax((S + S′)/τ)` over classes; without `s_prime` this is the plain
/// contrastive probability. `tau` is a one-element value.
pub fn augmented_probability<T: Scalar>(tape: &mut Tape<'_, T>, s: Var, s_prime: Option<Var>, tau: Var) -> Result<Var> {
    let t = tape.value(tau);
    if t.len() != 1 || t[0] <= T::zero() || !t[0].is_finite() {
        return Err(NumError::Parameter(format!(
            "temperature must be a positive scalar, got {:?}",
            tape.value(tau)
        )));
    }
    let logits = match s_prime {
        Some(sp) => tape.add(s, sp)?,
        None => s,
    };
    let logits = tape.div_scalar(logits, tau)?;
    let axis = tape.shape(logits).len() - 1;
    tape.softmax(logits, axis, 1.0)
}

/// Two-class probability `softmax([0, z])` from a linear-probe logit `z [B×1]`.
pub fn probe_probability<T: Scalar>(tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
    let s = dims(tape, z, "probe_probability", 2)?;
    let zero = tape.constant(&[s[0], 1], vec![T::zero(); s[0]])?;
    let logits = tape.concat(&[zero, z], 1)?;
    tape.softmax(logits, 1, 1.0)
}

/// Mean loss over the batch for probabilities `[B×2]` and labels in {0, 1}.
/// Log arguments are clamped at [`LOG_FLOOR`]; the tape counts clamps.
pub fn loss<T: Scalar>(tape: &mut Tape<'_, T>, probs: Var, labels: &[u8], form: LossForm) -> Result<Var> {
    let s = dims(tape, probs, "loss", 2)?;
    if s[1] != 2 || s[0] != labels.len() {
        return Err(NumError::Shape {
            op: "loss",
            detail: format!("probabilities {s:?} for {} labels", labels.len()),
        });
    }
    let mut weights = Vec::with_capacity(2 * labels.len());
    for &y in labels {
        if y > 1 {
            return Err(NumError::Parameter(format!("label {y} is not 0 or 1")));
        }
        // For two classes 1 − P̂(y) = P̂(1 − y), so each form is a weighted sum of log P̂.
        let w: [f64; 2] = match (form, y) {
            (LossForm::Bce, 0) => [1.0, 0.0],
            (LossForm::Bce, _) => [0.0, 1.0],
            (LossForm::Literal, 0) => [1.0, 1.0],
            (LossForm::Literal, _) => [0.0, 1.0],
        };
        weights.extend(w.iter().map(|&x| T::of(x)));
    }
    let logp = tape.log_clamped(probs, LOG_FLOOR);
    let w = tape.constant(&s, weights)?;
    let weighted = tape.mul(logp, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}
