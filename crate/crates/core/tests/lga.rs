mod common;

use common::{max_abs, opts, rng};
use fatformer::lga::{
    augmented_probability, loss, patch_based_enhance, probe_probability, similarity_cls, similarity_patches,
    text_guided_interact,
};
use fatformer::LossForm;
use numcore::{grad_check, NumError, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn leaf(tape: &mut Tape<'_, f64>, shape: &[usize], data: &[f64]) -> numcore::Var {
    tape.leaf(&Tensor::from_f64(shape, data).unwrap())
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// `softmax(q · kᵀ) · k + q`, row by row.
fn attend_oracle(q: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for qi in q {
        let w = softmax(&k.iter().map(|kj| dot(qi, kj)).collect::<Vec<_>>());
        for c in 0..qi.len() {
            out.push(qi[c] + k.iter().zip(&w).map(|(kj, wj)| wj * kj[c]).sum::<f64>());
        }
    }
    out
}

#[test]
fn enhancer_with_one_patch_adds_it_to_every_context() {
    let mut tape = Tape::new();
    let ctx = leaf(&mut tape, &[1, 2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
    let patch = leaf(&mut tape, &[1, 1, 3], &[0.1, 0.2, 0.3]);
    let out = patch_based_enhance(&mut tape, ctx, patch).unwrap();
    let want = [1.1, 2.2, 3.3, -0.9, 0.7, 0.3];
    assert!(max_abs(tape.value(out), &want) < 1e-12);
}

#[test]
fn enhancer_with_zero_patches_returns_context() {
    let mut tape = Tape::new();
    let c = Tensor::<f64>::randn(&[1, 4, 5], 1.0, &mut rng(1));
    let ctx = tape.leaf(&c);
    let patches = tape.leaf(&Tensor::zeros(&[1, 6, 5]));
    let out = patch_based_enhance(&mut tape, ctx, patches).unwrap();
    assert_eq!(tape.value(out), c.data());
}

#[test]
fn enhancer_matches_direct_formula() {
    let mut r = rng(2);
    let c = Tensor::<f64>::randn(&[1, 2, 4], 1.0, &mut r);
    let p = Tensor::<f64>::randn(&[1, 3, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let (vc, vp) = (tape.leaf(&c), tape.leaf(&p));
    let out = patch_based_enhance(&mut tape, vc, vp).unwrap();
    assert!(max_abs(tape.value(out), &attend_oracle(&rows(&c), &rows(&p))) <= 1e-6);
}

#[test]
fn interactor_with_one_class_adds_its_embedding() {
    let mut r = rng(3);
    let p = Tensor::<f64>::randn(&[1, 4, 3], 1.0, &mut r);
    let t = Tensor::<f64>::randn(&[1, 1, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let (vp, vt) = (tape.leaf(&p), tape.leaf(&t));
    let out = text_guided_interact(&mut tape, vp, vt).unwrap();
    let want: Vec<f64> = p.data().iter().enumerate().map(|(i, v)| v + t.data()[i % 3]).collect();
    assert!(max_abs(tape.value(out), &want) < 1e-12);
}

#[test]
fn interactor_with_identical_rows_adds_that_row() {
    let mut r = rng(4);
    let p = Tensor::<f64>::randn(&[1, 4, 3], 1.0, &mut r);
    let row = [0.3, -0.7, 1.1];
    let mut tape = Tape::new();
    let vp = tape.leaf(&p);
    let vt = leaf(&mut tape, &[1, 2, 3], &[row, row].concat());
    let out = text_guided_interact(&mut tape, vp, vt).unwrap();
    let want: Vec<f64> = p.data().iter().enumerate().map(|(i, v)| v + row[i % 3]).collect();
    assert!(max_abs(tape.value(out), &want) < 1e-12);
}

#[test]
fn interactor_matches_direct_formula() {
    let mut r = rng(5);
    let p = Tensor::<f64>::randn(&[1, 4, 6], 1.0, &mut r);
    let t = Tensor::<f64>::randn(&[1, 2, 6], 1.0, &mut r);
    let mut tape = Tape::new();
    let (vp, vt) = (tape.leaf(&p), tape.leaf(&t));
    let out = text_guided_interact(&mut tape, vp, vt).unwrap();
    assert!(max_abs(tape.value(out), &attend_oracle(&rows(&p), &rows(&t))) <= 1e-6);
}

#[test]
fn shape_mismatches_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::<f64>::zeros(&[1, 2, 3]));
    let b = tape.leaf(&Tensor::<f64>::zeros(&[1, 2, 4]));
    assert!(matches!(
        patch_based_enhance(&mut tape, a, b),
        Err(NumError::Shape { .. })
    ));
    assert!(matches!(
        text_guided_interact(&mut tape, a, b),
        Err(NumError::Shape { .. })
    ));
}

#[test]
fn cls_similarity_examples() {
    let mut tape = Tape::new();
    let cls = leaf(&mut tape, &[1, 2], &[0.0, 2.0]);
    let text = leaf(&mut tape, &[1, 2, 2], &[3.0, 0.0, 0.0, 0.5]);
    let s = similarity_cls(&mut tape, cls, text).unwrap();
    assert!(max_abs(tape.value(s), &[0.0, 1.0]) < 1e-15);

    let same = leaf(&mut tape, &[1, 2, 2], &[1.0, -2.0, 1.0, -2.0]);
    let s = similarity_cls(&mut tape, cls, same).unwrap();
    assert_eq!(tape.value(s)[0], tape.value(s)[1]);
}

#[test]
fn cls_similarity_matches_cosine_oracle() {
    let mut r = rng(6);
    let c = Tensor::<f64>::randn(&[3, 5], 1.0, &mut r);
    let t = Tensor::<f64>::randn(&[3, 2, 5], 1.0, &mut r);
    let mut tape = Tape::new();
    let (vc, vt) = (tape.leaf(&c), tape.leaf(&t));
    let s = similarity_cls(&mut tape, vc, vt).unwrap();
    let (cr, tr) = (rows(&c), rows(&t));
    let want: Vec<f64> = (0..3)
        .flat_map(|b| (0..2).map(|m| cos(&cr[b], &tr[2 * b + m])).collect::<Vec<_>>())
        .collect();
    assert!(max_abs(tape.value(s), &want) <= 1e-7);
}

#[test]
fn zero_vectors_are_degenerate() {
    let mut tape = Tape::new();
    let cls = tape.leaf(&Tensor::<f64>::zeros(&[1, 3]));
    let text = leaf(&mut tape, &[1, 2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    assert!(matches!(
        similarity_cls(&mut tape, cls, text),
        Err(NumError::DegenerateVector { .. })
    ));
    let patches = leaf(&mut tape, &[1, 2, 3], &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    assert!(matches!(
        similarity_patches(&mut tape, patches, text),
        Err(NumError::DegenerateVector { .. })
    ));
}

#[test]
fn patch_similarity_examples_and_oracle() {
    let mut r = rng(7);
    let t = Tensor::<f64>::randn(&[1, 2, 5], 1.0, &mut r);
    let tr = rows(&t);

    let one = Tensor::<f64>::randn(&[1, 1, 5], 1.0, &mut r);
    let mut tape = Tape::new();
    let (vo, vt) = (tape.leaf(&one), tape.leaf(&t));
    let s = similarity_patches(&mut tape, vo, vt).unwrap();
    let single = [cos(one.data(), &tr[0]), cos(one.data(), &tr[1])];
    assert!(max_abs(tape.value(s), &single) <= 1e-12);

    let rep = leaf(&mut tape, &[1, 3, 5], &one.data().repeat(3));
    let s = similarity_patches(&mut tape, rep, vt).unwrap();
    assert!(max_abs(tape.value(s), &single) <= 1e-12);

    let p = Tensor::<f64>::randn(&[1, 4, 5], 1.0, &mut r);
    let vp = tape.leaf(&p);
    let s = similarity_patches(&mut tape, vp, vt).unwrap();
    let pr = rows(&p);
    let want: Vec<f64> = (0..2)
        .map(|m| pr.iter().map(|x| cos(x, &tr[m])).sum::<f64>() / 4.0)
        .collect();
    assert!(max_abs(tape.value(s), &want) <= 1e-7);
}

fn probability(s: &[f64], sp: &[f64], tau: f64) -> numcore::Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = s.len() / 2;
    let vs = leaf(&mut tape, &[b, 2], s);
    let vsp = leaf(&mut tape, &[b, 2], sp);
    let t = leaf(&mut tape, &[1], &[tau]);
    let p = augmented_probability(&mut tape, vs, Some(vsp), t)?;
    Ok(tape.value(p).to_vec())
}

#[test]
fn probability_examples() {
    for (c, tau) in [(0.3, 0.07), (-0.9, 1.0), (0.0, 0.5)] {
        let p = probability(&[c, c], &[c, c], tau).unwrap();
        assert!(max_abs(&p, &[0.5, 0.5]) < 1e-15);
    }
    let p = probability(&[0.0, 1.5], &[0.0, 0.5], 1.0).unwrap();
    assert!(max_abs(&p, &softmax(&[0.0, 2.0])) < 1e-12);
    assert!(max_abs(&p, &[0.1192, 0.8808]) <= 1e-4);
}

#[test]
fn non_positive_temperature_is_rejected() {
    for tau in [0.0, -0.1] {
        assert!(matches!(
            probability(&[0.1, 0.2], &[0.0, 0.0], tau),
            Err(NumError::Parameter(_))
        ));
    }
}

#[test]
fn probe_probability_is_softmax_of_zero_and_logit() {
    let mut tape = Tape::new();
    let z = leaf(&mut tape, &[2, 1], &[0.0, 2.0]);
    let p = probe_probability(&mut tape, z).unwrap();
    let want = [[0.5, 0.5], [0.1192, 0.8808]].concat();
    assert!(max_abs(tape.value(p), &want) <= 1e-4);
}

fn loss_value(probs: &[f64], labels: &[u8], form: LossForm) -> f64 {
    let mut tape = Tape::new();
    let p = leaf(&mut tape, &[labels.len(), 2], probs);
    let l = loss(&mut tape, p, labels, form).unwrap();
    tape.item(l)
}

#[test]
fn loss_examples() {
    for form in [LossForm::Literal, LossForm::Bce] {
        assert!((loss_value(&[0.5, 0.5], &[1], form) - 2f64.ln()).abs() < 1e-12);
        assert!(loss_value(&[1e-9, 1.0 - 1e-9], &[1], form) < 1e-8);
    }
    let literal = loss_value(&[0.8808, 0.1192], &[0], LossForm::Literal);
    assert!((literal - 2.2538).abs() <= 1e-3, "{literal}");
    let bce = loss_value(&[0.8808, 0.1192], &[0], LossForm::Bce);
    assert!((bce + 0.8808f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_is_averaged_over_the_batch() {
    let probs = [0.5, 0.5, 0.8808, 0.1192];
    let mean = loss_value(&probs, &[1, 0], LossForm::Literal);
    let each = loss_value(&probs[..2], &[1], LossForm::Literal) + loss_value(&probs[2..], &[0], LossForm::Literal);
    assert!((mean - each / 2.0).abs() < 1e-12);
}

#[test]
fn exact_zero_probability_is_clamped_and_counted() {
    let mut tape = Tape::new();
    let p = leaf(&mut tape, &[1, 2], &[1.0, 0.0]);
    let l = loss(&mut tape, p, &[1], LossForm::Bce).unwrap();
    assert!((tape.item(l) + 1e-12f64.ln()).abs() < 1e-9);
    assert_eq!(tape.clamped_logs(), 1);
}

#[test]
fn bad_labels_are_rejected() {
    let mut tape = Tape::new();
    let p = leaf(&mut tape, &[1, 2], &[0.5, 0.5]);
    assert!(loss(&mut tape, p, &[2], LossForm::Bce).is_err());
    assert!(loss(&mut tape, p, &[0, 1], LossForm::Bce).is_err());
}

fn argmin_over_grid(label: u8, form: LossForm) -> f64 {
    (1..1000)
        .map(|i| i as f64 / 1000.0)
        .map(|q| (q, loss_value(&[1.0 - q, q], &[label], form)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

#[test]
fn loss_minimizers() {
    // fake label: both forms are driven toward P̂(1) = 1
    assert_eq!(argmin_over_grid(1, LossForm::Literal), 0.999);
    assert_eq!(argmin_over_grid(1, LossForm::Bce), 0.999);
    // real label: cross-entropy is driven toward P̂(1) = 0, while the literal
    // form −log P̂(0) − log P̂(1) is smallest at the uniform distribution
    assert_eq!(argmin_over_grid(0, LossForm::Bce), 0.001);
    assert!((argmin_over_grid(0, LossForm::Literal) - 0.5).abs() < 1e-12);
}

#[test]
fn alignment_chain_passes_grad_check() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(8);
    let (b, c, n, m, d) = (2, 3, 4, 2, 5);
    let ctx = store
        .insert("ctx", Tensor::randn(&[b, c, d], 1.0, &mut r).with_grad())
        .unwrap();
    let patches = store
        .insert("patches", Tensor::randn(&[b, n, d], 1.0, &mut r).with_grad())
        .unwrap();
    let cls = store
        .insert("cls", Tensor::randn(&[b, d], 1.0, &mut r).with_grad())
        .unwrap();
    let text_w = store
        .insert("text_w", Tensor::randn(&[c * d, m * d], 0.3, &mut r).with_grad())
        .unwrap();
    let tau = store.insert("tau", Tensor::scalar(0.5).with_grad()).unwrap();
    for form in [LossForm::Literal, LossForm::Bce] {
        let report = grad_check(
            &store,
            |tape| {
                let (vc, vp, vcls, vw, vt) = (
                    tape.param(ctx),
                    tape.param(patches),
                    tape.param(cls),
                    tape.param(text_w),
                    tape.param(tau),
                );
                let e = patch_based_enhance(tape, vc, vp)?;
                // a linear stand-in for the text encoder
                let flat = tape.reshape(e, &[b, c * d])?;
                let text = tape.matmul(flat, vw)?;
                let text = tape.reshape(text, &[b, m, d])?;
                let s = similarity_cls(tape, vcls, text)?;
                let aligned = text_guided_interact(tape, vp, text)?;
                let sp = similarity_patches(tape, aligned, text)?;
                let p = augmented_probability(tape, s, Some(sp), vt)?;
                loss(tape, p, &[0, 1], form)
            },
            &opts(1e-4),
        )
        .unwrap();
        assert!(report.passed(), "{form:?}: {report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn probability_is_a_distribution(
        s in prop::collection::vec(-1.0f64..1.0, 2),
        sp in prop::collection::vec(-1.0f64..1.0, 2),
        tau in 1e-3f64..1.0,
    ) {
        let p = probability(&s, &sp, tau).unwrap();
        prop_assert!(p.iter().all(|&v| v > 0.0 || (s[0] + sp[0] - s[1] - sp[1]).abs() / tau > 700.0));
        prop_assert!((p[0] + p[1] - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn argmax_invariances(
        s in prop::collection::vec(-1.0f64..1.0, 2),
        sp in prop::collection::vec(-1.0f64..1.0, 2),
        tau in 1e-2f64..1.0,
        tau2 in 1e-2f64..1.0,
        shift in -5.0f64..5.0,
    ) {
        let z = [s[0] + sp[0], s[1] + sp[1]];
        prop_assume!((z[0] - z[1]).abs() > 1e-9);
        let arg = |p: &[f64]| usize::from(p[1] > p[0]);
        let base = arg(&probability(&s, &sp, tau).unwrap());
        prop_assert_eq!(base, arg(&probability(&s, &sp, tau2).unwrap()));
        let s2: Vec<f64> = s.iter().map(|v| v + shift).collect();
        let sp2: Vec<f64> = sp.iter().map(|v| v + shift).collect();
        prop_assert_eq!(base, arg(&probability(&s2, &sp2, tau).unwrap()));
    }
}
