//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, 1e-8)` over every probed coordinate.
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares autodiff gradients of the scalar built by `f` against central differences,
/// for every coordinate of every parameter in `params` (or only those in `only`).
pub fn grad_check<F>(params: &ParamStore, only: Option<&[&str]>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("grad_check eps {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        Ok(g.value(out).item())
    };

    let mut graph = Graph::new();
    let out = f(&mut graph, params)?;
    let grads = graph.backward(out)?;

    let names: Vec<String> = match only {
        Some(list) => list.iter().map(|s| s.to_string()).collect(),
        None => params.names().map(str::to_string).collect(),
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for name in names {
        let n = params.require(&name)?.numel();
        let analytic = grads.param(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = params.require(&name)?.data()[i];
            probe.get_mut(&name).expect("present").data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
