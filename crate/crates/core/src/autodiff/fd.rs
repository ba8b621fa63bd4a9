//! Finite-difference utilities: gradient checks and Hessian-vector products.

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};
use crate::tensor::Tensor;

/// Default probe size for Hessian-vector products, before scaling by the
/// direction norm.
pub const DEFAULT_HVP_EPS: f64 = 1e-3;

/// Smallest direction norm treated as non-zero.
const DIRECTION_NORM_FLOOR: f64 = 1e-12;

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&x.with_data(probe.clone())?)?;
        probe[i] = orig - eps;
        let down = f(&x.with_data(probe.clone())?)?;
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    x.with_data(grad)
}

/// Central-difference gradient of a scalar function of a whole parameter set.
pub fn finite_diff_grad_params(
    f: impl Fn(&ParamSet) -> Result<f64>,
    x: &ParamSet,
    eps: f64,
) -> Result<GradMap> {
    let mut flat = x.flatten();
    let mut grad = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + eps;
        let up = f(&x.unflatten(&flat)?)?;
        flat[i] = orig - eps;
        let down = f(&x.unflatten(&flat)?)?;
        flat[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    x.unflatten(&grad)
}

/// Directional derivative of a gradient field: `[G(x + ê v) - G(x - ê v)] / 2ê`
/// with `ê = eps / max(|v|, 1e-12)`, so that the probe displacement has norm
/// `eps`. A zero direction yields `zero_like` exactly.
pub fn fd_directional<F>(grad_field: F, x: &ParamSet, v: &ParamSet, eps: f64, zero_like: &ParamSet) -> Result<GradMap>
where
    F: Fn(&ParamSet) -> Result<GradMap>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    if !x.congruent(v) {
        return Err(Error::Shape("direction does not match the probed point".into()));
    }
    let vnorm = v.norm();
    if vnorm == 0.0 {
        return Ok(zero_like.zeros_like());
    }
    let h = eps / vnorm.max(DIRECTION_NORM_FLOOR);
    let up = grad_field(&x.axpy(h, v)?)?;
    let down = grad_field(&x.axpy(-h, v)?)?;
    let out = up.sub(&down)?.scale(1.0 / (2.0 * h));
    if !out.all_finite() {
        return Err(Error::NonFinite("finite-difference Hessian-vector product".into()));
    }
    Ok(out)
}

/// Mixed second-order product `vᵀ ∂²L/∂ω∂θ`, returned over θ.
///
/// `grad_theta(ω, θ)` must return `∇_θ L(ω, θ)`. The product is obtained by
/// central differences of `∇_θ L` as ω moves along `v`.
pub fn fd_mixed_hvp<F>(grad_theta: F, omega: &ParamSet, theta: &ParamSet, v: &GradMap, eps: f64) -> Result<GradMap>
where
    F: Fn(&ParamSet, &ParamSet) -> Result<GradMap>,
{
    fd_directional(|w| grad_theta(w, theta), omega, v, eps, theta)
}
