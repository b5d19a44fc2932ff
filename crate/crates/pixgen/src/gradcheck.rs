//! Central finite-difference verification of analytic gradients. The
//! numeric side only ever calls the loss as a black-box scalar function, so
//! it stays independent of the tape implementation it checks.

use crate::decoder::{nll_loss, nll_loss_and_grads};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::params::{GradMap, ModelParams};
use crate::vocab::Caption;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |a - n| / max(|a|, |n|, 1e-8).
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare analytic gradients against `(f(p+eps) - f(p-eps)) / (2 eps)` for
/// every coordinate of every parameter tensor.
pub fn grad_check<V, G>(
    params: &ModelParams,
    eps: f64,
    value_fn: V,
    grad_fn: G,
) -> Result<GradCheckReport>
where
    V: Fn(&ModelParams) -> Result<f64>,
    G: Fn(&ModelParams) -> Result<GradMap>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference eps must be positive".into()));
    }
    let base = value_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {base}")));
    }
    let analytic = grad_fn(params)?;

    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    for name in params.names() {
        let a_tensor = analytic
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("no analytic gradient for {name}")))?;
        let len = a_tensor.numel();
        for i in 0..len {
            let original = {
                let t = work.get_mut(&name).expect("named tensor");
                let v = t.data()[i];
                t.data_mut()[i] = v + eps;
                v
            };
            let f_plus = value_fn(&work)?;
            work.get_mut(&name).expect("named tensor").data_mut()[i] = original - eps;
            let f_minus = value_fn(&work)?;
            work.get_mut(&name).expect("named tensor").data_mut()[i] = original;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "perturbed loss non-finite at {name}[{i}]"
                )));
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = a_tensor.data()[i];
            let e = rel_err(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst =
                    Some(WorstCoord { tensor: name.clone(), index: i, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

/// Gradient check of the batch NLL loss, the end-to-end training objective.
pub fn grad_check_nll(
    params: &ModelParams,
    batch: &[(ImageGrid, Caption)],
    eps: f64,
) -> Result<GradCheckReport> {
    grad_check(
        params,
        eps,
        |p| nll_loss(batch, p),
        |p| nll_loss_and_grads(batch, p, None).map(|(_, g)| g),
    )
}
