//! Central finite-difference gradient checking.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// Per-element disagreement between autodiff and central differences.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Detailed outcome of [`finite_diff_check_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    g.value(out).item().ok_or_else(|| AutodiffError::NonScalarRoot(g.shape(out).to_vec()))
}

/// Compares autodiff gradients of `f` against central differences with step `eps`.
///
/// `f` receives a fresh graph and the parameter leaves (in order of `params`)
/// and must return a scalar node.
pub fn finite_diff_check_report<F>(f: F, params: &[Tensor], eps: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(AutodiffError::InvalidStep(eps));
    }
    let mut g = Graph::new();
    let ids = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|id| grads.value(&g, *id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*id))))
        .collect();
    drop(g);

    let mut report = FiniteDiffReport { max_rel_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, elements: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval_scalar(&f, &work).map_err(|_| AutodiffError::NonFiniteProbe { param: pi, element: ei })?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval_scalar(&f, &work).map_err(|_| AutodiffError::NonFiniteProbe { param: pi, element: ei })?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let e = rel_err(a, numeric);
            report.elements += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((pi, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between autodiff and central-difference gradients.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    finite_diff_check_report(f, params, eps).map(|r| r.max_rel_error)
}
