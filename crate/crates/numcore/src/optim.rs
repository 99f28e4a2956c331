use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |store: &ParamStore<T>| {
            store
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.len()])
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Rebuilds a state from serialized parts.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(NumError::Contract("adam moment arrays disagree".into()));
        }
        Ok(AdamState { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[T], &[T]) {
        (&self.m[id.index()], &self.v[id.index()])
    }

    /// Applies one update to every trainable parameter that carries a gradient,
    /// then clears all gradients. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(NumError::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        let ids: Vec<ParamId> = store.trainable().collect();
        if !ids.iter().any(|&id| store.get(id).grad().is_some()) {
            return Err(NumError::Contract("adam step without any populated gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.config.beta1);
        let b2 = T::of(self.config.beta2);
        let lr = T::of(self.config.lr);
        let eps = T::of(self.config.eps);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for id in ids {
            let p = store.get_mut(id);
            let Some(g) = p.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            if m.len() != g.len() {
                return Err(NumError::Contract(format!(
                    "moment shape mismatch for parameter {}",
                    id.index()
                )));
            }
            let data = p.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
