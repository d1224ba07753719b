//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the tape's backward pass: it re-evaluates
//! the loss at perturbed parameter values, so it stays an independent oracle
//! for the analytic gradients.

use super::{NdError, NodeId, Parameter, Tape, Tensor};

/// Result of a gradient check, with the worst offending element for
/// diagnostics.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

fn eval_loss<F>(values: &[Tensor], build: &F) -> Result<f64, NdError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NdError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(NdError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Analytic gradients of a scalar function of the given parameters, via the
/// tape's backward pass.
pub fn analytic_gradient<F>(params: &[Parameter], build: &F) -> Result<Vec<Tensor>, NdError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NdError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    Ok(ids.iter().map(|&id| tape.grad(id).clone()).collect())
}

/// Central-difference gradient: (f(x + eps) - f(x - eps)) / (2 eps) per
/// parameter element.
pub fn numeric_gradient<F>(
    params: &[Parameter],
    eps: f64,
    build: &F,
) -> Result<Vec<Tensor>, NdError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NdError>,
{
    if eps <= 0.0 {
        return Err(NdError::InvalidEps(eps));
    }
    let mut values: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
    let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for pi in 0..values.len() {
        for ei in 0..values[pi].numel() {
            let orig = values[pi].data()[ei];
            values[pi].data_mut()[ei] = orig + eps;
            let plus = eval_loss(&values, build)?;
            values[pi].data_mut()[ei] = orig - eps;
            let minus = eval_loss(&values, build)?;
            values[pi].data_mut()[ei] = orig;
            grads[pi].data_mut()[ei] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Worst relative error |a - n| / max(|a|, |n|, 1e-8) over all elements.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(1e-8);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Compare the tape's gradients against central finite differences over
/// every element of every parameter and report the maximum relative error.
pub fn grad_check<F>(params: &[Parameter], eps: f64, build: F) -> Result<GradCheckReport, NdError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NdError>,
{
    let analytic = analytic_gradient(params, &build)?;
    let numeric = numeric_gradient(params, eps, &build)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (pi, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (ei, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let denom = av.abs().max(nv.abs()).max(1e-8);
            let rel = (av - nv).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params[pi].name.clone();
                report.worst_index = ei;
                report.worst_analytic = av;
                report.worst_numeric = nv;
            }
        }
    }
    Ok(report)
}
