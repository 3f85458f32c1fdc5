//! Central-difference gradient checking against [`Graph::backward`].

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Denominator floor for the relative error, so that components whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, element index)` of the worst component.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<Fun>(f: &Fun, params: &[Tensor<f64>]) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::GradCheck(format!(
            "function output has shape {:?}",
            value.shape()
        )));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::GradCheck("non-finite function value".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of scalar `f` with central differences of step
/// `eps` on every element of every parameter.
pub fn grad_check<Fun>(f: Fun, params: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::GradCheck(e.to_string()))?;
    let out = f(&mut g, &vars).map_err(|e| Error::GradCheck(e.to_string()))?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tol,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .slice(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = evaluate(&f, &work).map_err(|e| Error::GradCheck(e.to_string()))?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = evaluate(&f, &work).map_err(|e| Error::GradCheck(e.to_string()))?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ei];
            if !a.is_finite() {
                return Err(Error::GradCheck(format!("non-finite gradient at param {pi}[{ei}]")));
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (pi, ei);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
