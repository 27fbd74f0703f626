//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Outcome of a gradient check; `worst` locates the component with the
/// largest relative error as (input index, element index).
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_relative_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn observe(&mut self, at: (usize, usize), analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_relative_error || self.checked == 1 {
            self.max_relative_error = err;
            self.worst = at;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn scalar_of(graph: &Graph, v: Var) -> Result<f64> {
    let t = graph.value(v);
    if !t.is_scalar() {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Checks the gradient of a scalar function of one tensor; returns the worst
/// relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = check_inputs(|g, xs| f(g, xs[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_relative_error)
}

/// Gradient check over several free inputs.
pub fn check_inputs<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = xs
            .iter()
            .map(|x| g.variable(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|x| g.variable(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();

    let mut report = GradCheckReport::new();
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            report.observe((k, i), analytic[k][i], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Gradient check of a scalar loss over every element of every parameter.
/// `params` is perturbed in place and restored before returning.
pub fn check_params<F>(params: &mut Params, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?.into_param_grads(params);

    let mut report = GradCheckReport::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let analytic = grads
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params.value(id).len()]);
        for i in 0..analytic.len() {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + h;
            let plus = {
                let mut g = Graph::new();
                let v = f(&mut g, params)?;
                scalar_of(&g, v)?
            };
            params.value_mut(id).data_mut()[i] = orig - h;
            let minus = {
                let mut g = Graph::new();
                let v = f(&mut g, params)?;
                scalar_of(&g, v)?
            };
            params.value_mut(id).data_mut()[i] = orig;
            report.observe((id.index(), i), analytic[i], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
