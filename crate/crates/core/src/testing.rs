//! Test support: central finite-difference gradient checking.
//!
//! The checker only ever calls the forward closure, so it is independent of
//! the backward implementation it verifies.

use crate::tensor::{Graph, Tensor, Var};
use crate::Result;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Check every entry of every input (or at most `max_per_input` evenly spaced
/// entries per input) against central differences with step `h`.
pub fn check_gradients(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    h: f64,
    max_per_input: Option<usize>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = match max_per_input {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = t.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe, f)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe, f)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_input = k;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// `Σ w ⊙ x` for a fixed weight tensor: turns any output into a scalar whose
/// gradient exercises a full vector-Jacobian product.
pub fn project(g: &mut Graph, x: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Finite-difference check of parameter gradients: `f` builds a scalar from
/// the parameters bound out of the store it is given. Only parameters listed
/// in `params` are probed (at most `max_per_param` evenly spaced entries each).
pub fn check_param_gradients(
    store: &crate::nn::ParamStore,
    params: &[crate::nn::ParamId],
    f: &dyn Fn(&mut Graph, &crate::nn::ParamStore) -> Result<Var>,
    h: f64,
    max_per_param: Option<usize>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let bound: std::collections::HashMap<usize, Var> = g.bound_params().into_iter().collect();

    let mut probe = store.clone();
    let mut report = GradReport::default();
    for (k, &id) in params.iter().enumerate() {
        let value = store.get(id).clone();
        let analytic = bound
            .get(&id.0)
            .and_then(|&v| g.grad(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let n = value.numel();
        let stride = match max_per_param {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = value.data()[i];
            let mut eval_at = |x: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = x;
                let mut g = Graph::new();
                let out = f(&mut g, &probe)?;
                Ok(g.value(out).item())
            };
            let plus = eval_at(orig + h)?;
            let minus = eval_at(orig - h)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_input = k;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
