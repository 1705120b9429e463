//! Hessian-vector products by central differences of an exact gradient.

use super::mlp::{grad_wrt_mask, loss_and_grads};
use super::types::{Batch, MaskVector, MlpSpec, ParamVector};
use crate::error::{Error, Result};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Step used when callers do not supply one: `1e-4 * (1 + max|delta|)`.
pub fn default_hvp_eps(mask: &MaskVector) -> f64 {
    let inf = mask.as_slice().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    1e-4 * (1.0 + inf)
}

/// `H v` for the Hessian of the function whose gradient is `grad`, evaluated at `point`.
///
/// The direction is normalised before stepping and the result rescaled by `|v|`,
/// so `eps` is an absolute step length in parameter space.
pub fn hvp_central<F>(grad: F, point: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::Usage(format!("hvp step must be positive, got {eps}")));
    }
    if v.len() != point.len() {
        return Err(Error::Usage(format!(
            "hvp direction has length {}, point has {}",
            v.len(),
            point.len()
        )));
    }
    let scale = norm(v);
    if scale == 0.0 {
        return Ok(vec![0.0; point.len()]);
    }
    let shifted = |sign: f64| -> Vec<f64> { point.iter().zip(v).map(|(p, d)| p + sign * eps * d / scale).collect() };
    let plus = grad(&shifted(1.0))?;
    let minus = grad(&shifted(-1.0))?;
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| (a - b) / (2.0 * eps) * scale)
        .collect())
}

/// Hessian (with respect to the mask) of the dataset-mean loss, applied to `v`.
pub fn hvp_mask(
    spec: &MlpSpec,
    params: &ParamVector,
    mask: &MaskVector,
    dataset: &Batch<'_>,
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    hvp_central(
        |delta| grad_wrt_mask(spec, params, &MaskVector::from_vec(delta.to_vec()), dataset).map(MaskVector::into_vec),
        mask.as_slice(),
        v,
        eps,
    )
}

/// Mixed second derivative `d/dtheta (grad_delta L . u)`, i.e. how the parameter
/// gradient moves when the mask is pushed along `u`.
pub fn mixed_theta_mask(
    spec: &MlpSpec,
    params: &ParamVector,
    mask: &MaskVector,
    batch: &Batch<'_>,
    u: &[f64],
    eps: f64,
) -> Result<ParamVector> {
    if u.iter().all(|x| *x == 0.0) {
        return Ok(ParamVector::zeros(params.shapes().to_vec()));
    }
    let values = hvp_central(
        |delta| {
            loss_and_grads(spec, params, &MaskVector::from_vec(delta.to_vec()), batch)
                .map(|g| g.theta.values().to_vec())
        },
        mask.as_slice(),
        u,
        eps,
    )?;
    ParamVector::from_parts(values, params.shapes().to_vec())
}
