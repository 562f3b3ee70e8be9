use crate::error::Result;
use crate::tensor::Tensor;

use super::{Graph, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub coordinates: usize,
    /// `(param index, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Denominator floor for the relative error so exactly-zero gradients
/// compare as absolute differences.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the scalar `f` against
/// `(f(x+ε) − f(x−ε)) / 2ε` at every coordinate of every parameter.
///
/// `f` receives the graph and one [`Var`] per entry of `params`.
pub fn grad_check<'p, F>(f: F, params: &'p [Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'p, f64>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().zip(params).map(|(&v, p)| grads.tensor(v, p)).collect()
    };

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|p| g.constant_owned(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for idx in 0..p.numel() {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((pi, idx));
            }
        }
    }
    Ok(report)
}
