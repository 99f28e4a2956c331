#![allow(dead_code)]

use numcore::{GradCheckOptions, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adds Gaussian noise to every trainable tensor, moving the store away from
/// initializations where whole subgraphs carry zero gradient.
pub fn perturb(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        let t = store.get_mut(id);
        let noise = Tensor::<f64>::randn(t.shape(), std, &mut r);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
}

pub fn opts(tol: f64) -> GradCheckOptions {
    GradCheckOptions {
        tol,
        ..Default::default()
    }
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
