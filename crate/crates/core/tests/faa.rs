mod common;

use common::{max_abs, opts, perturb, rng};
use fatformer::faa::{fuse, FreqBranch, ImageBranch};
use fatformer::wavelet::dwt;
use fatformer::{AdapterConfig, ForgeryAwareAdapter, Interaction};
use numcore::nn::{LayerNorm, MultiHeadAttention, LN_EPS};
use numcore::{grad_check, ParamStore, Tape, Tensor};

fn config(dim: usize) -> AdapterConfig {
    AdapterConfig {
        dim,
        heads: 2,
        ..Default::default()
    }
}

fn get(store: &ParamStore<f64>, id: numcore::ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let s = (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| (v - mean) / s * g + b)
        .collect()
}

fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (din, dout) = (x.len(), b.len());
    (0..dout)
        .map(|o| b[o] + (0..din).map(|i| x[i] * w[i * dout + o]).sum::<f64>())
        .collect()
}

/// Pre-norm residual self-attention over the rows of `seq`, evaluated with loops.
fn attention_oracle(
    store: &ParamStore<f64>,
    ln: &LayerNorm,
    mha: &MultiHeadAttention,
    seq: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let (d, heads) = (mha.dim, mha.heads);
    let dh = d / heads;
    let (g, b) = (get(store, ln.gain), get(store, ln.bias));
    let normed: Vec<Vec<f64>> = seq.iter().map(|x| layer_norm(x, &g, &b)).collect();
    let proj = |l: &numcore::nn::Linear| -> Vec<Vec<f64>> {
        let (w, bb) = (get(store, l.weight), get(store, l.bias));
        normed.iter().map(|x| affine(x, &w, &bb)).collect()
    };
    let (q, k, v) = (proj(&mha.q), proj(&mha.k), proj(&mha.v));
    let len = seq.len();
    let mut ctx = vec![vec![0.0; d]; len];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..len {
            let scores: Vec<f64> = (0..len)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..len).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let (w, bb) = (get(store, mha.out.weight), get(store, mha.out.bias));
    seq.iter()
        .zip(&ctx)
        .map(|(x, c)| x.iter().zip(affine(c, &w, &bb)).map(|(a, o)| a + o).collect())
        .collect()
}

#[test]
fn identity_image_branch_passes_nonnegative_input() {
    let mut store = ParamStore::<f64>::new();
    let br = ImageBranch::identity(&mut store, "img", 8, 1).unwrap();
    let mut g = Tensor::<f64>::uniform(&[2, 4, 4, 8], 1.0, &mut rng(1));
    g.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let mut tape = Tape::with_params(&store);
    let x = tape.leaf(&g);
    let y = br.forward(&mut tape, x).unwrap();
    assert!(max_abs(tape.value(y), g.data()) <= 1e-12);
}

#[test]
fn identity_image_branch_passes_signed_input_at_every_kernel_size() {
    for k in [1, 3, 5] {
        let mut store = ParamStore::<f64>::new();
        let br = ImageBranch::identity(&mut store, "img", 6, k).unwrap();
        let g = Tensor::<f64>::randn(&[1, 4, 4, 6], 1.0, &mut rng(2));
        let mut tape = Tape::with_params(&store);
        let x = tape.leaf(&g);
        let y = br.forward(&mut tape, x).unwrap();
        assert!(max_abs(tape.value(y), g.data()) <= 1e-12, "kernel {k}");
    }
}

#[test]
fn zero_second_kernel_gives_zero_output() {
    let mut store = ParamStore::<f64>::new();
    let br = ImageBranch::identity(&mut store, "img", 8, 1).unwrap();
    store.get_mut(br.conv2_weight).data_mut().fill(0.0);
    let g = Tensor::<f64>::randn(&[1, 4, 4, 8], 1.0, &mut rng(3));
    let mut tape = Tape::with_params(&store);
    let x = tape.leaf(&g);
    let y = br.forward(&mut tape, x).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn image_branch_matches_per_pixel_matmul() {
    let mut store = ParamStore::<f64>::new();
    let br = ImageBranch::identity(&mut store, "img", 8, 1).unwrap();
    perturb(&mut store, 0.3, 4);
    let g = Tensor::<f64>::randn(&[1, 4, 4, 8], 1.0, &mut rng(5));
    let mut tape = Tape::with_params(&store);
    let x = tape.leaf(&g);
    let y = br.forward(&mut tape, x).unwrap();
    let (w1, b1) = (get(&store, br.conv1_weight), get(&store, br.conv1_bias));
    let (w2, b2) = (get(&store, br.conv2_weight), get(&store, br.conv2_bias));
    let mut want = Vec::new();
    for px in g.data().chunks(8) {
        let h: Vec<f64> = affine(px, &w1, &b1).into_iter().map(|v| v.max(0.0)).collect();
        want.extend(affine(&h, &w2, &b2));
    }
    assert!(max_abs(tape.value(y), &want) <= 1e-6);
}

#[test]
fn freq_branch_starts_as_identity() {
    let mut store = ParamStore::<f64>::new();
    let br = FreqBranch::new(&mut store, "f", &config(8), &mut rng(6)).unwrap();
    let g = Tensor::<f64>::randn(&[2, 4, 6, 8], 1.0, &mut rng(7));
    let mut tape = Tape::with_params(&store);
    let x = tape.leaf(&g);
    let y = br.forward(&mut tape, x).unwrap();
    assert!(max_abs(tape.value(y), g.data()) <= 1e-5);
}

#[test]
fn constant_input_has_only_low_band_and_valid_attention() {
    let mut store = ParamStore::<f64>::new();
    let br = FreqBranch::new(&mut store, "f", &config(8), &mut rng(8)).unwrap();
    perturb(&mut store, 0.2, 9);
    let g = Tensor::<f64>::full(&[1, 4, 4, 8], 0.4);
    let mut tape = Tape::with_params(&store);
    let x = tape.leaf(&g);
    let bands = dwt(&mut tape, x).unwrap();
    let v = tape.value(bands);
    assert!(v[4 * 8..].iter().all(|&c| c.abs() < 1e-15));
    let seq = tape.permute(bands, &[0, 2, 1, 3]).unwrap();
    let seq = tape.reshape(seq, &[4, 4, 8]).unwrap();
    let h = br.inter_norm.forward(&mut tape, seq).unwrap();
    let att = br.inter.forward_with_weights(&mut tape, h, h, h).unwrap();
    for row in tape.value(att.weights).chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let out = br.forward(&mut tape, x).unwrap();
    assert!(tape.value(out).iter().all(|v| v.is_finite()));
}

#[test]
fn band_attention_matches_loop_oracle() {
    let mut store = ParamStore::<f64>::new();
    let br = FreqBranch::new(&mut store, "f", &config(8), &mut rng(10)).unwrap();
    perturb(&mut store, 0.2, 11);
    let g = Tensor::<f64>::randn(&[1, 4, 4, 8], 1.0, &mut rng(12));
    let mut tape = Tape::with_params(&store);
    let x = tape.leaf(&g);
    let bands = dwt(&mut tape, x).unwrap();
    let bv = tape.value(bands).to_vec();
    let inter = br.inter_band(&mut tape, bands).unwrap();
    let intra = br.intra_band(&mut tape, bands).unwrap();
    let (p, d) = (4, 8);
    let at = |k: usize, pos: usize| bv[(k * p + pos) * d..][..d].to_vec();

    let mut want_inter = vec![0.0; bv.len()];
    for pos in 0..p {
        let seq: Vec<Vec<f64>> = (0..4).map(|k| at(k, pos)).collect();
        for (k, row) in attention_oracle(&store, &br.inter_norm, &br.inter, &seq)
            .into_iter()
            .enumerate()
        {
            want_inter[(k * p + pos) * d..][..d].copy_from_slice(&row);
        }
    }
    assert!(max_abs(tape.value(inter), &want_inter) <= 1e-5);

    let mut want_intra = Vec::new();
    for k in 0..4 {
        let seq: Vec<Vec<f64>> = (0..p).map(|pos| at(k, pos)).collect();
        want_intra.extend(attention_oracle(&store, &br.intra_norm, &br.intra, &seq).concat());
    }
    assert!(max_abs(tape.value(intra), &want_intra) <= 1e-5);
}

#[test]
fn fuse_examples() {
    let mut r = rng(13);
    let a = Tensor::<f64>::randn(&[1, 2, 2, 3], 1.0, &mut r);
    let f = Tensor::<f64>::randn(&[1, 2, 2, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let (va, vf) = (tape.leaf(&a), tape.leaf(&f));
    let zero = tape.leaf(&Tensor::scalar(0.0));
    let out = fuse(&mut tape, va, vf, zero).unwrap();
    assert_eq!(tape.value(out), a.data());

    let vz = tape.leaf(&Tensor::zeros(&[1, 2, 2, 3]));
    let lam = tape.leaf(&Tensor::scalar(3.7));
    let out = fuse(&mut tape, va, vz, lam).unwrap();
    assert_eq!(tape.value(out), a.data());

    let one = tape.leaf(&Tensor::scalar(1.0));
    let out = fuse(&mut tape, va, va, one).unwrap();
    let twice: Vec<f64> = a.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.value(out), twice.as_slice());

    let other = tape.leaf(&Tensor::zeros(&[1, 2, 3, 2]));
    assert!(fuse(&mut tape, va, other, one).is_err());
}

#[test]
fn adapter_is_identity_at_initialization() {
    let mut store = ParamStore::<f64>::new();
    let ad = ForgeryAwareAdapter::new(&mut store, "a", &config(8), &mut rng(14)).unwrap();
    let g = Tensor::<f64>::randn(&[2, 4, 4, 8], 1.0, &mut rng(15));
    let mut tape = Tape::with_params(&store);
    let x = tape.leaf(&g);
    let y = ad.forward(&mut tape, x).unwrap();
    assert!(max_abs(tape.value(y), g.data()) <= 1e-5);
}

#[test]
fn adapter_preserves_shape_for_even_grids() {
    let mut store = ParamStore::<f64>::new();
    let ad = ForgeryAwareAdapter::new(&mut store, "a", &config(4), &mut rng(16)).unwrap();
    for (h, w) in [(2, 2), (2, 6), (8, 4)] {
        let mut tape = Tape::with_params(&store);
        let x = tape.leaf(&Tensor::randn(&[1, h, w, 4], 1.0, &mut rng(17)));
        let y = ad.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[1, h, w, 4]);
    }
    let mut tape = Tape::with_params(&store);
    let odd = tape.leaf(&Tensor::zeros(&[1, 3, 4, 4]));
    assert!(ad.forward(&mut tape, odd).is_err());
}

fn branch_outputs(
    store: &ParamStore<f64>,
    ad: &ForgeryAwareAdapter,
    g: &Tensor<f64>,
) -> (Vec<f64>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut tape = Tape::with_params(store);
    let x = tape.leaf(g);
    let y = ad.forward(&mut tape, x).unwrap();
    let img = ad.image.as_ref().map(|b| {
        let v = b.forward(&mut tape, x).unwrap();
        tape.value(v).to_vec()
    });
    let freq = ad.freq.as_ref().map(|b| {
        let v = b.forward(&mut tape, x).unwrap();
        tape.value(v).to_vec()
    });
    (tape.value(y).to_vec(), img, freq)
}

#[test]
fn single_branch_ablations() {
    let g = Tensor::<f64>::randn(&[1, 4, 4, 8], 1.0, &mut rng(18));

    let mut store = ParamStore::<f64>::new();
    let cfg = AdapterConfig {
        freq_branch: false,
        ..config(8)
    };
    let ad = ForgeryAwareAdapter::new(&mut store, "a", &cfg, &mut rng(19)).unwrap();
    perturb(&mut store, 0.2, 20);
    assert!(ad.lambda.is_none());
    let (y, img, _) = branch_outputs(&store, &ad, &g);
    assert_eq!(y, img.unwrap());

    let mut store = ParamStore::<f64>::new();
    let cfg = AdapterConfig {
        image_branch: false,
        ..config(8)
    };
    let ad = ForgeryAwareAdapter::new(&mut store, "a", &cfg, &mut rng(21)).unwrap();
    perturb(&mut store, 0.2, 22);
    let lam = store.get(ad.lambda.unwrap()).data()[0];
    let (y, _, freq) = branch_outputs(&store, &ad, &g);
    let want: Vec<f64> = freq.unwrap().iter().map(|v| lam * v).collect();
    assert!(max_abs(&y, &want) <= 1e-12);
}

fn adapter_grad_check(cfg: &AdapterConfig, seed: u64) {
    let mut store = ParamStore::<f64>::new();
    let ad = ForgeryAwareAdapter::new(&mut store, "a", cfg, &mut rng(seed)).unwrap();
    perturb(&mut store, 0.2, seed + 1);
    let g = store
        .insert("g", Tensor::randn(&[1, 4, 4, 8], 1.0, &mut rng(seed + 2)).with_grad())
        .unwrap();
    let probe = Tensor::<f64>::randn(&[1, 4, 4, 8], 1.0, &mut rng(seed + 3));
    let report = grad_check(
        &store,
        |tape| {
            let x = tape.param(g);
            let y = ad.forward(tape, x)?;
            let p = tape.leaf(&probe);
            let m = tape.mul(y, p)?;
            Ok(tape.sum(m))
        },
        &opts(1e-4),
    )
    .unwrap();
    assert!(report.passed(), "{cfg:?}: {report:?}");
}

#[test]
fn ablation_variants_pass_grad_check() {
    let base = config(8);
    adapter_grad_check(&base, 30);
    adapter_grad_check(
        &AdapterConfig {
            freq_branch: false,
            ..base.clone()
        },
        40,
    );
    adapter_grad_check(
        &AdapterConfig {
            image_branch: false,
            ..base.clone()
        },
        50,
    );
    adapter_grad_check(
        &AdapterConfig {
            interaction: Interaction::Inter,
            ..base.clone()
        },
        60,
    );
    adapter_grad_check(
        &AdapterConfig {
            interaction: Interaction::Intra,
            ..base.clone()
        },
        70,
    );
    adapter_grad_check(&AdapterConfig { kernel_size: 3, ..base }, 80);
}

#[test]
fn interaction_modes_preserve_shape() {
    for interaction in [Interaction::Inter, Interaction::Intra, Interaction::Both] {
        let mut store = ParamStore::<f64>::new();
        let cfg = AdapterConfig {
            interaction,
            ..config(8)
        };
        let ad = ForgeryAwareAdapter::new(&mut store, "a", &cfg, &mut rng(90)).unwrap();
        perturb(&mut store, 0.2, 91);
        let mut tape = Tape::with_params(&store);
        let x = tape.leaf(&Tensor::randn(&[2, 4, 4, 8], 1.0, &mut rng(92)));
        let y = ad.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 8]);
    }
}
