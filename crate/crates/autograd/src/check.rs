//! Central finite-difference gradient verification.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Worst coordinate found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
        }
    }

    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if self.coordinates == 0 || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst_input = input;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.coordinates += 1;
    }
}

/// `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f` at `inputs` against
/// central differences `(f(x+eps) − f(x−eps)) / 2eps` over every coordinate
/// and returns the maximum relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    Ok(grad_check_report(f, inputs, eps)?.max_rel_error)
}

pub fn grad_check_report<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| g.input(x.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&g, &vars)?;
        g.backward(out)?;
        vars.iter().map(|v| g.grad(*v)).collect()
    };
    let mut report = GradCheckReport::new();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            report.record(i, j, analytic[i].data()[j], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Gradient check against parameters of a store. `probes` lists, per
/// parameter, which flat coordinates to perturb.
pub fn grad_check_params<F>(f: F, store: &ParamStore, probes: &[(ParamId, Vec<usize>)], eps: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let mut work = store.clone();
    work.zero_grads();
    {
        let g = Graph::new();
        let out = f(&g, &work)?;
        g.backward_into(out, &mut work)?;
    }
    let analytic: Vec<Tensor> = work.iter().map(|(_, p)| p.grad.clone()).collect();
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        Ok(f(&g, s)?.item())
    };
    let mut report = GradCheckReport::new();
    for (id, coords) in probes {
        for &j in coords {
            let orig = work.get(*id).value.data()[j];
            work.get_mut(*id).value.data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(*id).value.data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(*id).value.data_mut()[j] = orig;
            report.record(id.index(), j, analytic[id.index()].data()[j], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}
