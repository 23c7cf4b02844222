//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max|ad − fd| / max(‖ad‖∞, ‖fd‖∞)` over the checked coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Options for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords: None,
        }
    }
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences, in f64, for every input tensor.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut ad = Vec::new();
    let mut fd = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let step = opts.max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let zero = Tensor::zeros(inputs[k].shape());
        let gk = grads.get(*var).unwrap_or(&zero);
        for i in (0..n).step_by(step) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            fd.push((plus - minus) / (2.0 * opts.eps));
            ad.push(gk.data()[i]);
        }
    }
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max_abs_error = ad.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let denom = inf(&ad).max(inf(&fd)).max(f64::MIN_POSITIVE);
    Ok(GradCheck {
        rel_error: max_abs_error / denom,
        max_abs_error,
        checked: ad.len(),
    })
}
