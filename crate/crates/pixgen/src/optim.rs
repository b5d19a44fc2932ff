//! Global-norm gradient clipping and the RMSProp update rule.

use crate::error::{Error, Result};
use crate::params::{GradMap, ModelParams};

/// RMSProp second-moment decay.
pub const RMSPROP_RHO: f64 = 0.9;
/// RMSProp denominator stabilizer.
pub const RMSPROP_EPS: f64 = 1e-8;

/// Per-parameter squared-gradient accumulators plus a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub acc: GradMap,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        OptState { acc: params.zero_grads(), step: 0 }
    }
}

/// Scale the whole gradient set so its global L2 norm does not exceed
/// `threshold`. Returns the pre-clip norm. Gradients at or under the
/// threshold pass through untouched.
pub fn clip_gradients(grads: &mut GradMap, threshold: f64) -> Result<f64> {
    if threshold <= 0.0 {
        return Err(Error::InvalidArgument("clip threshold must be positive".into()));
    }
    let mut sq_sum = 0.0;
    for (name, g) in grads.iter() {
        for &v in g.data() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("gradient entry in tensor {name}")));
            }
            sq_sum += v * v;
        }
    }
    let norm = sq_sum.sqrt();
    if norm > threshold {
        let factor = threshold / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    Ok(norm)
}

/// One RMSProp step: `acc <- rho acc + (1-rho) g^2`, then
/// `theta <- theta - lr g / sqrt(acc + eps)`, per coordinate.
pub fn rmsprop_update(
    params: &mut ModelParams,
    grads: &GradMap,
    opt: &mut OptState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    for name in params.names() {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::Shape(format!("no gradient for parameter {name}")))?;
        let acc = opt
            .acc
            .get_mut(&name)
            .ok_or_else(|| Error::Shape(format!("no accumulator for parameter {name}")))?;
        let theta = params.get_mut(&name).expect("named tensor");
        if g.shape() != theta.shape() || acc.shape() != theta.shape() {
            return Err(Error::Shape(format!(
                "misaligned shapes for {name}: param {:?}, grad {:?}, acc {:?}",
                theta.shape(),
                g.shape(),
                acc.shape()
            )));
        }
        let td = theta.data_mut();
        let ad = acc.data_mut();
        let gd = g.data();
        for i in 0..td.len() {
            ad[i] = RMSPROP_RHO * ad[i] + (1.0 - RMSPROP_RHO) * gd[i] * gd[i];
            td[i] -= lr * gd[i] / (ad[i] + RMSPROP_EPS).sqrt();
        }
    }
    opt.step += 1;
    Ok(())
}
