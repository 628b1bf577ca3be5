//! Adam with decoupled weight decay, and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of `store` that has an entry in `grads`.
    /// Parameters outside `store` (e.g. frozen ones) are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), vec![3.0]);
        g.insert("b".to_string(), vec![4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = BTreeMap::new();
        small.insert("a".to_string(), vec![0.1]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"], vec![0.1]);
    }

    #[test]
    fn first_step_moves_by_lr_and_skips_unknown_names() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -1.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), vec![0.5, -2.0]);
        g.insert("frozen".to_string(), vec![1.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &g);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert!(store.get("frozen").is_none());
    }

    #[test]
    fn decay_shrinks_weights_without_gradient_signal() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![2.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), vec![0.0]);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store, &g);
        assert!((store.get("w").unwrap().data()[0] - 1.9).abs() < 1e-12);
    }
}
