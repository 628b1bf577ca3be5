//! Named parameter tensors and the per-step binding of parameters into a graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Parameters keyed by stable dotted paths, iterated in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("valid shape"));
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::filled(shape, value));
    }

    /// Weight `[fan_in×fan_out]` with std `1/sqrt(fan_in)` and zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        self.normal(&format!("{prefix}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng);
        self.fill(&format!("{prefix}.b"), &[fan_out], 0.0);
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.fill(&format!("{prefix}.gamma"), &[width], 1.0);
        self.fill(&format!("{prefix}.beta"), &[width], 0.0);
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        crate::dataset::hex_digest(h)
    }
}

/// A graph under construction together with the parameters bound into it.
///
/// Trainable parameters become gradient-tracking leaves on first use when the
/// context is in training mode; frozen parameters are always constants.
pub struct Ctx<'p> {
    pub g: Graph,
    trainable: &'p ParamStore,
    frozen: Option<&'p ParamStore>,
    track: bool,
    bound: BTreeMap<String, Var>,
}

impl<'p> Ctx<'p> {
    pub fn new(trainable: &'p ParamStore, frozen: Option<&'p ParamStore>, track: bool) -> Self {
        Self {
            g: Graph::new(),
            trainable,
            frozen,
            track,
            bound: BTreeMap::new(),
        }
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    /// Binds parameter `name`, looking in the trainable store first.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let var = if let Some(t) = self.trainable.get(name) {
            self.g.leaf(t.clone(), self.track)
        } else if let Some(t) = self.frozen.and_then(|f| f.get(name)) {
            self.g.constant(t.clone())
        } else {
            return Err(TensorError::Invalid(format!("unknown parameter {name}")));
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// `x·W + b` using `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta)
    }

    /// Names of the trainable parameters bound so far.
    pub fn bound_trainable(&self) -> Vec<&str> {
        self.bound
            .keys()
            .filter(|n| self.trainable.get(n).is_some())
            .map(|s| s.as_str())
            .collect()
    }

    /// Gradients of `loss` keyed by trainable parameter name. Parameters that
    /// never entered the graph are absent.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut grads = self.g.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in &self.bound {
            if self.trainable.get(name).is_some() {
                if let Some(gv) = grads.take(*var) {
                    out.insert(name.clone(), gv);
                }
            }
        }
        Ok(out)
    }
}
