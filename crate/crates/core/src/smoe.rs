//! Sparse mixture of experts with noisy top-k gating, used to impute the
//! states of masked feature values.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Var;
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub noise_enabled: bool,
}

impl Default for SmoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            top_k: 2,
            expert_hidden: 256,
            noise_enabled: true,
        }
    }
}

impl SmoeConfig {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.n_experts == 0 {
            out.push(("smoe.experts", "must be positive".to_string()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            out.push((
                "smoe.top_k",
                format!("must lie in 1..={}, got {}", self.n_experts, self.top_k),
            ));
        }
        if self.expert_hidden == 0 {
            out.push(("smoe.hidden", "must be positive".to_string()));
        }
        out
    }
}

/// Routing of one row: selected experts in rank order and their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn init_experts(store: &mut ParamStore, d: usize, cfg: &SmoeConfig, rng: &mut impl Rng) {
    let std = 1.0 / (d as f64).sqrt();
    store.normal("smoe.wg", &[d, cfg.n_experts], std, rng);
    store.normal("smoe.wnoise", &[d, cfg.n_experts], std, rng);
    for e in 0..cfg.n_experts {
        store.linear(&format!("smoe.e{e}.ff1"), d, cfg.expert_hidden, rng);
        store.linear(&format!("smoe.e{e}.ff2"), cfg.expert_hidden, d, rng);
    }
}

/// Single shared layer standing in for the expert bank.
pub fn init_linear_imputer(store: &mut ParamStore, d: usize, rng: &mut impl Rng) {
    store.linear("smoe.linear", d, d, rng);
}

/// Indices of the `k` largest entries, larger first; equal values rank the
/// lower index first.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gate weights `[M×E]` for rows of `m[M×d]`. Noise is added only when the
/// configuration enables it and an rng is supplied.
pub fn gate<R: Rng>(ctx: &mut Ctx, m: Var, cfg: &SmoeConfig, rng: Option<&mut R>) -> Result<(Var, Vec<GateDecision>)> {
    let wg = ctx.p("smoe.wg")?;
    let mut logits = ctx.g.matmul(m, wg)?;
    let rows = ctx.g.value(m).shape()[0];
    let e = cfg.n_experts;
    if let (true, Some(rng)) = (cfg.noise_enabled, rng) {
        let wn = ctx.p("smoe.wnoise")?;
        let raw = ctx.g.matmul(m, wn)?;
        let spread = ctx.g.softplus(raw);
        let mu: Vec<f64> = (0..rows * e)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let mu = ctx.constant(Tensor::matrix(rows, e, mu)?);
        let noise = ctx.g.mul(mu, spread)?;
        logits = ctx.g.add(logits, noise)?;
    }
    let values = ctx.g.value(logits).data().to_vec();
    let mut keep = vec![false; rows * e];
    let mut chosen = Vec::with_capacity(rows);
    for r in 0..rows {
        let sel = top_k(&values[r * e..(r + 1) * e], cfg.top_k);
        for &j in &sel {
            keep[r * e + j] = true;
        }
        chosen.push(sel);
    }
    let masked = ctx.g.mask_fill(logits, &keep)?;
    let weights = ctx.g.softmax(masked, 1)?;
    let w = ctx.g.value(weights).data();
    let decisions = chosen
        .into_iter()
        .enumerate()
        .map(|(r, indices)| GateDecision {
            weights: indices.iter().map(|&j| w[r * e + j]).collect(),
            indices,
        })
        .collect();
    Ok((weights, decisions))
}

/// Weighted sum of the selected experts' outputs for every row of `m`.
/// Experts that no row selects are never evaluated.
pub fn impute<R: Rng>(ctx: &mut Ctx, m: Var, cfg: &SmoeConfig, rng: Option<&mut R>) -> Result<(Var, Vec<GateDecision>)> {
    let (weights, decisions) = gate(ctx, m, cfg, rng)?;
    let shape = ctx.g.value(m).shape().to_vec();
    let mut acc = ctx.constant(Tensor::zeros(&shape));
    for e in 0..cfg.n_experts {
        let rows: Vec<usize> = decisions
            .iter()
            .enumerate()
            .filter(|(_, d)| d.indices.contains(&e))
            .map(|(r, _)| r)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let x = ctx.g.gather_rows(m, &rows)?;
        let h = ctx.linear(x, &format!("smoe.e{e}.ff1"))?;
        let h = ctx.g.gelu(h);
        let y = ctx.linear(h, &format!("smoe.e{e}.ff2"))?;
        let w = ctx.g.gather_rows(weights, &rows)?;
        let w = ctx.g.column(w, e)?;
        let y = ctx.g.mul_rows(y, w)?;
        acc = ctx.g.scatter_add_rows(acc, &rows, y)?;
    }
    Ok((acc, decisions))
}

pub fn impute_linear(ctx: &mut Ctx, m: Var) -> Result<Var> {
    ctx.linear(m, "smoe.linear")
}

/// `states` with row `rows[h]` replaced by row `h` of `imputed`.
pub fn substitute_masks(ctx: &mut Ctx, states: Var, rows: &[usize], imputed: Var) -> Result<Var> {
    if rows.is_empty() {
        return Ok(states);
    }
    ctx.g.replace_rows(states, rows, imputed)
}

/// `sqrt(Σ‖m̃ − m‖² / M)` against constant teacher rows; `None` when `M = 0`.
pub fn imputation_loss(ctx: &mut Ctx, imputed: Var, teacher: &Tensor) -> Result<Option<Var>> {
    let shape = ctx.g.value(imputed).shape().to_vec();
    if shape != teacher.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "imputation_loss",
            left: shape,
            right: teacher.shape().to_vec(),
        });
    }
    let m = shape[0];
    if m == 0 {
        return Ok(None);
    }
    let t = ctx.constant(teacher.clone());
    let diff = ctx.g.sub(imputed, t)?;
    let sq = ctx.g.mul(diff, diff)?;
    let total = ctx.g.sum(sq);
    let avg = ctx.g.scale(total, 1.0 / m as f64);
    Ok(Some(ctx.g.sqrt(avg)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn gate_with_logits(logits: &[f64], k: usize) -> GateDecision {
        // identity input and W_g = logits as a 1×E matrix
        let mut store = ParamStore::new();
        store.insert("smoe.wg", Tensor::matrix(1, logits.len(), logits.to_vec()).unwrap());
        let cfg = SmoeConfig {
            n_experts: logits.len(),
            top_k: k,
            expert_hidden: 1,
            noise_enabled: false,
        };
        let mut ctx = Ctx::new(&store, None, false);
        let m = ctx.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let (_, mut d) = gate::<ChaCha8Rng>(&mut ctx, m, &cfg, None).unwrap();
        d.remove(0)
    }

    #[test]
    fn hand_example() {
        let d = gate_with_logits(&[0.5, 2.0, 1.0, -1.0], 2);
        assert_eq!(d.indices, vec![1, 2]);
        assert!((d.weights[0] - 0.731059).abs() < 1e-6);
        assert!((d.weights[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k(&[1.0, 3.0, 1.0, 1.0], 2), vec![1, 0]);
        let d = gate_with_logits(&[2.0, 2.0, 2.0], 1);
        assert_eq!(d.indices, vec![0]);
        assert_eq!(d.weights, vec![1.0]);
    }

    #[test]
    fn imputation_loss_hand_value() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, None, false);
        let m = ctx.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = imputation_loss(&mut ctx, m, &Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap())
            .unwrap()
            .unwrap();
        assert!((ctx.g.value(l).item() - 5.0).abs() < 1e-9);
    }
}
