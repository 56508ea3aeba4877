//! Central finite-difference gradient checking. Kept independent of the
//! backward pass: it only re-evaluates forward passes on perturbed leaves,
//! so it can serve as an oracle for every differentiable op and for whole
//! models.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Builds a scalar loss from leaf variables.
pub type LossBuilder<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name (or input index) and element of the worst error.
    pub worst: Option<(String, usize)>,
}

fn eval(build: LossBuilder<'_>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Checks analytic gradients of `build` against central differences with
/// step `eps` for every element of every input tensor. Relative error is
/// |a - n| / max(1, |a|, |n|).
pub fn check_gradient(build: LossBuilder<'_>, inputs: &[Tensor], eps: f64) -> Result<FdReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut worst = None;
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += eps;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= eps;
            let numeric = (eval(build, &plus)? - eval(build, &minus)?) / (2.0 * eps);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((format!("input{ti}"), ei));
            }
            checked += 1;
        }
    }
    Ok(FdReport {
        max_rel_err,
        checked,
        worst,
    })
}

/// Like [`check_gradient`] but perturbs the entries of a named parameter
/// set instead of explicit leaves; `build` receives the modified set.
pub fn check_param_gradient(
    build: &dyn Fn(&mut Graph, &super::ParamSet) -> Result<Var>,
    params: &super::ParamSet,
    eps: f64,
) -> Result<FdReport> {
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.backward(loss)?;
    let grads = g.param_grads();

    let eval_params = |p: &super::ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).data()[0])
    };

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut worst = None;
    for name in params.names() {
        let numel = params.get(&name).unwrap().numel();
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; numel]);
        for ei in 0..numel {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[ei] += eps;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[ei] -= eps;
            let numeric = (eval_params(&plus)? - eval_params(&minus)?) / (2.0 * eps);
            let a = analytic[ei];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((name.clone(), ei));
            }
            checked += 1;
        }
    }
    Ok(FdReport {
        max_rel_err,
        checked,
        worst,
    })
}
