//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{contract, Result};

/// Floor for the relative-error denominator, so near-zero gradients are
/// compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `d f(x) / d x` for a scalar-valued graph function.
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    gradcheck_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        step,
        tol,
        None,
    )
}

/// Checks a scalar graph function against every input in `inputs`.
///
/// With `max_per_input = Some(k)`, only `k` evenly spaced entries of each input
/// are perturbed; the analytic gradient is still computed in full.
pub fn gradcheck_many<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
    max_per_input: Option<usize>,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    contract!(step > 0.0, "gradcheck step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    contract!(g.value(loss).numel() == 1, "gradcheck function must be scalar-valued");
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        for i in sample_indices(input.numel(), max_per_input) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_err = max_err.max(relative_error(analytic[k].data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        passed: max_err <= tol,
        max_rel_error: max_err,
        checked,
    })
}

/// Checks a hand-supplied gradient function against central differences of `value`.
pub fn gradcheck_fn<V, G>(value: V, grad: G, x: &Tensor, step: f64, tol: f64) -> Result<GradCheck>
where
    V: Fn(&Tensor) -> Result<f64>,
    G: Fn(&Tensor) -> Result<Tensor>,
{
    let analytic = grad(x)?;
    contract!(analytic.shape() == x.shape(), "gradient shape must match input");
    let mut work = x.clone();
    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        work.data_mut()[i] = orig + step;
        let up = value(&work)?;
        work.data_mut()[i] = orig - step;
        let down = value(&work)?;
        work.data_mut()[i] = orig;
        max_err = max_err.max(relative_error(analytic.data()[i], (up - down) / (2.0 * step)));
    }
    Ok(GradCheck {
        passed: max_err <= tol,
        max_rel_error: max_err,
        checked: x.numel(),
    })
}

pub(crate) fn sample_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < n => (0..k).map(|j| j * n / k + (n / k) / 2).collect(),
        _ => (0..n).collect(),
    }
}
