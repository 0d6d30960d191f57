//! Central finite-difference checks against the tape gradients, in f64.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all checked
    /// entries; zero when both are zero.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

impl GradCheckReport {
    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        let mut max_abs: f64 = 0.0;
        for &(a, n) in pairs {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            max_abs = max_abs.max((a - n).abs());
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel_error = if denom == 0.0 {
            0.0
        } else {
            diff.sqrt() / denom
        };
        Self {
            rel_error,
            max_abs_error: max_abs,
            entries: pairs.len(),
        }
    }
}

fn eval_scalar(
    inputs: &[Tensor<f64>],
    f: &impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Checks d f / d inputs for a scalar-valued graph function.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut pairs = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval_scalar(&work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval_scalar(&work, &f)?;
            work[i].data_mut()[j] = orig;
            pairs.push((analytic.data()[j], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(GradCheckReport::from_pairs(&pairs))
}

/// Checks parameter gradients of a model loss. At most `max_per_param`
/// evenly spaced entries of each parameter are perturbed.
pub fn check_params(
    store: &ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    h: f64,
    max_per_param: usize,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic: Vec<(String, Tensor<f64>)> = grads
        .params()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let mut work = store.clone();
    let mut pairs = Vec::new();
    for name in store.names() {
        let n = store.get(name).expect("own name").numel();
        let a = analytic.iter().find(|(k, _)| k == name).map(|(_, t)| t);
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = store.get(name).expect("own name").data()[j];
            let eval = |work: &ParamStore<f64>| -> Result<f64> {
                let mut g = Graph::new();
                let out = f(&mut g, work)?;
                Ok(g.value(out).item())
            };
            work.get_mut(name).expect("own name").data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(name).expect("own name").data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(name).expect("own name").data_mut()[j] = orig;
            let an = a.map_or(0.0, |t| t.data()[j]);
            pairs.push((an, (fp - fm) / (2.0 * h)));
        }
    }
    Ok(GradCheckReport::from_pairs(&pairs))
}
