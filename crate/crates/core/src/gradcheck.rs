//! Centered finite-difference checks for analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Segment, Var};
use crate::tensor::{Result, Tensor};

/// Step used by every finite-difference check in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input, element, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// centered differences for every element of every input.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (e, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Uniform entries in [-2, 2).
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("nonzero shape")
}

/// Sum of `x` weighted by fixed pseudo-random weights, so gradients differ
/// per element.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One gradient case per differentiable op, each ending in a weighted sum.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 1)
            }),
        ),
        (
            "add_sub_mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.sub(v[0], v[1])?;
                let y = g.mul(a, b)?;
                weighted_sum(g, y, 2)
            }),
        ),
        (
            "add_row_scale_mean",
            vec![vec![3, 2], vec![2]],
            Box::new(|g, v| {
                let y = g.add_row(v[0], v[1])?;
                let y = g.scale(y, 0.7);
                let w = weighted_sum(g, y, 3)?;
                let m = g.mean(y);
                g.add(w, m)
            }),
        ),
        (
            "relu",
            vec![vec![6]],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, 4)
            }),
        ),
        (
            "gelu",
            vec![vec![6]],
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                weighted_sum(g, y, 5)
            }),
        ),
        (
            "softplus",
            vec![vec![6]],
            Box::new(|g, v| {
                let y = g.softplus(v[0]);
                weighted_sum(g, y, 6)
            }),
        ),
        (
            "sqrt",
            vec![vec![4]],
            Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.sum(sq);
                Ok(g.sqrt(s))
            }),
        ),
        (
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(g, y, 7)
            }),
        ),
        (
            "concat_reshape",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                let y = g.reshape(y, vec![5, 2])?;
                let y = g.softmax(y, 1)?;
                weighted_sum(g, y, 8)
            }),
        ),
        (
            "embedding",
            vec![vec![5, 3]],
            Box::new(|g, v| {
                let y = g.embedding(v[0], &[4, 0, 4, 2])?;
                weighted_sum(g, y, 9)
            }),
        ),
        (
            "softmax",
            vec![vec![3, 4]],
            Box::new(|g, v| {
                let y = g.softmax(v[0], 1)?;
                weighted_sum(g, y, 10)
            }),
        ),
        (
            "softmax_masked",
            vec![vec![2, 4]],
            Box::new(|g, v| {
                let m = g.mask_fill(v[0], &[true, false, true, true, false, true, true, false])?;
                let y = g.softmax(m, 1)?;
                weighted_sum(g, y, 11)
            }),
        ),
        (
            "rows",
            vec![vec![5, 3], vec![2, 3], vec![3, 3]],
            Box::new(|g, v| {
                let r = g.replace_rows(v[0], &[1, 3], v[1])?;
                let s = g.scatter_add_rows(r, &[0, 3, 0], v[2])?;
                let y = g.gather_rows(s, &[4, 0, 3, 3])?;
                weighted_sum(g, y, 12)
            }),
        ),
        (
            "mul_rows_column",
            vec![vec![3, 4], vec![3, 2]],
            Box::new(|g, v| {
                let c = g.column(v[1], 1)?;
                let y = g.mul_rows(v[0], c)?;
                weighted_sum(g, y, 13)
            }),
        ),
        (
            "group_mean",
            vec![vec![5, 2]],
            Box::new(|g, v| {
                let y = g.group_mean(v[0], &[vec![0, 1, 2], vec![4], vec![1, 3]])?;
                weighted_sum(g, y, 14)
            }),
        ),
        (
            "attention",
            vec![vec![7, 4], vec![7, 4], vec![7, 4]],
            Box::new(|g, v| {
                let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
                let y = g.attention(v[0], v[1], v[2], &segs, 2, false, None)?;
                weighted_sum(g, y, 15)
            }),
        ),
        (
            "attention_causal_masked",
            vec![vec![6, 4], vec![6, 4], vec![6, 4]],
            Box::new(|g, v| {
                let segs = [Segment { start: 0, len: 6 }];
                let valid = [true, true, false, true, true, false];
                let y = g.attention(v[0], v[1], v[2], &segs, 2, true, Some(&valid))?;
                weighted_sum(g, y, 16)
            }),
        ),
    ]
}
