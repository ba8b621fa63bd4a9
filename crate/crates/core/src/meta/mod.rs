//! Bilevel meta-learning engine.
//!
//! One iteration shares a single plain gradient step of the head on an inner
//! batch:
//!
//! ```text
//! ω* = ω - α ∇_ω L_inner(ω, θ)
//! ```
//!
//! The encoder θ then follows the total derivative of `L_outer1(ω*(θ), θ)`,
//! and the head initialization φ (from which ω was seeded) follows the
//! derivative of `L_outer2(ω*(φ))`.

pub mod pool;
mod schedule;
pub mod seg;

pub use schedule::LRSchedule;

use crate::autodiff::{fd_directional, fd_mixed_hvp};
use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};

/// A loss value with gradients over both parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    pub theta: GradMap,
    pub omega: GradMap,
}

/// The three losses of the dual bilevel problem.
pub trait BilevelObjective {
    type Batch;
    /// Side output of an outer-1 evaluation (e.g. pooled features).
    type Aux;

    fn inner(&self, theta: &ParamSet, omega: &ParamSet, batch: &Self::Batch) -> Result<LossGrads>;

    fn outer1(&self, theta: &ParamSet, omega: &ParamSet, batches: &[Self::Batch]) -> Result<(LossGrads, Self::Aux)>;

    fn outer2(&self, theta: &ParamSet, omega: &ParamSet, batches: &[Self::Batch]) -> Result<LossGrads>;
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {rate}")));
    }
    Ok(())
}

fn check_finite(what: &str, g: &GradMap) -> Result<()> {
    if !g.all_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerStep {
    pub omega_star: ParamSet,
    pub loss: f64,
    pub grad: GradMap,
}

/// `ω* = ω - α ∇_ω L_inner(ω, θ)`; θ is not touched.
pub fn inner_step<O: BilevelObjective>(
    obj: &O,
    theta: &ParamSet,
    omega: &ParamSet,
    batch: &O::Batch,
    alpha: f64,
) -> Result<InnerStep> {
    check_rate("inner rate", alpha)?;
    let lg = obj.inner(theta, omega, batch)?;
    check_finite("inner gradient", &lg.omega)?;
    let omega_star = if alpha == 0.0 { omega.clone() } else { omega.axpy(-alpha, &lg.omega)? };
    Ok(InnerStep { omega_star, loss: lg.loss, grad: lg.omega })
}

#[derive(Clone, Debug)]
pub struct Hypergradient<A> {
    /// `∂L_outer1(ω*, θ)/∂θ`.
    pub direct: GradMap,
    /// `vᵀ ∂²L_inner/∂ω∂θ` with `v = ∂L_outer1/∂ω*`, before scaling by `-α`.
    pub mixed: GradMap,
    /// `direct - α mixed`.
    pub total: GradMap,
    pub outer_loss: f64,
    pub aux: A,
}

/// Total derivative of `L_outer1(ω - α ∇_ω L_inner(ω, θ), θ)` in θ.
///
/// The mixed second-order product is a central difference of `∇_θ L_inner`
/// along `v`; its probe norm is `eps`.
#[allow(clippy::too_many_arguments)]
pub fn mfl_hypergradient<O: BilevelObjective>(
    obj: &O,
    theta: &ParamSet,
    omega: &ParamSet,
    omega_star: &ParamSet,
    inner_batch: &O::Batch,
    outer_batches: &[O::Batch],
    alpha: f64,
    eps: f64,
) -> Result<Hypergradient<O::Aux>> {
    check_rate("inner rate", alpha)?;
    let (outer, aux) = obj.outer1(theta, omega_star, outer_batches)?;
    check_finite("outer gradient", &outer.theta)?;
    check_finite("outer gradient", &outer.omega)?;
    let mixed = if alpha == 0.0 {
        theta.zeros_like()
    } else {
        fd_mixed_hvp(|w, t| Ok(obj.inner(t, w, inner_batch)?.theta), omega, theta, &outer.omega, eps)?
    };
    let total = outer.theta.axpy(-alpha, &mixed)?;
    check_finite("hypergradient", &total)?;
    Ok(Hypergradient { direct: outer.theta, mixed, total, outer_loss: outer.loss, aux })
}

/// Plain outer step `θ' = θ - β g` on the MFL hypergradient.
#[allow(clippy::too_many_arguments)]
pub fn mfl_outer_step<O: BilevelObjective>(
    obj: &O,
    theta: &ParamSet,
    omega: &ParamSet,
    omega_star: &ParamSet,
    inner_batch: &O::Batch,
    outer_batches: &[O::Batch],
    alpha: f64,
    beta: f64,
    eps: f64,
) -> Result<(ParamSet, Hypergradient<O::Aux>)> {
    check_rate("outer rate", beta)?;
    let hg = mfl_hypergradient(obj, theta, omega, omega_star, inner_batch, outer_batches, alpha, eps)?;
    let next = if beta == 0.0 { theta.clone() } else { theta.axpy(-beta, &hg.total)? };
    Ok((next, hg))
}

/// How the head-initialization gradient treats the inner step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MilOrder {
    /// `∂L_outer2/∂ω*`, dropping the inner-step Jacobian.
    First,
    /// `(I - α ∇²_ω L_inner) ∂L_outer2/∂ω*`; refused above `max_params`
    /// head parameters.
    Second { max_params: usize },
}

impl MilOrder {
    pub const DEFAULT_SECOND_ORDER_CAP: usize = 10_000;

    pub fn second() -> Self {
        MilOrder::Second { max_params: Self::DEFAULT_SECOND_ORDER_CAP }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilGradient {
    /// `∂L_outer2/∂ω*`.
    pub first: GradMap,
    /// Gradient applied to φ.
    pub total: GradMap,
    pub outer_loss: f64,
}

/// Gradient of `L_outer2(φ - α ∇_ω L_inner(φ, θ))` with respect to φ.
#[allow(clippy::too_many_arguments)]
pub fn mil_hypergradient<O: BilevelObjective>(
    obj: &O,
    theta: &ParamSet,
    phi: &ParamSet,
    omega_star: &ParamSet,
    inner_batch: &O::Batch,
    outer_batches: &[O::Batch],
    alpha: f64,
    order: MilOrder,
    eps: f64,
) -> Result<MilGradient> {
    check_rate("inner rate", alpha)?;
    if let MilOrder::Second { max_params } = order {
        if phi.numel() > max_params {
            return Err(Error::InvalidArgument(format!(
                "second-order head update needs {} parameters, cap is {max_params}",
                phi.numel()
            )));
        }
    }
    let outer = obj.outer2(theta, omega_star, outer_batches)?;
    check_finite("outer gradient", &outer.omega)?;
    let total = match order {
        MilOrder::Second { .. } if alpha != 0.0 => {
            let hg = fd_directional(|w| Ok(obj.inner(theta, w, inner_batch)?.omega), phi, &outer.omega, eps, phi)?;
            outer.omega.axpy(-alpha, &hg)?
        }
        _ => outer.omega.clone(),
    };
    check_finite("head-initialization gradient", &total)?;
    Ok(MilGradient { first: outer.omega, total, outer_loss: outer.loss })
}

/// Plain outer step `φ' = φ - β g` on the MIL gradient.
#[allow(clippy::too_many_arguments)]
pub fn mil_outer_step<O: BilevelObjective>(
    obj: &O,
    theta: &ParamSet,
    phi: &ParamSet,
    omega_star: &ParamSet,
    inner_batch: &O::Batch,
    outer_batches: &[O::Batch],
    alpha: f64,
    beta: f64,
    order: MilOrder,
    eps: f64,
) -> Result<(ParamSet, MilGradient)> {
    check_rate("outer rate", beta)?;
    let g = mil_hypergradient(obj, theta, phi, omega_star, inner_batch, outer_batches, alpha, order, eps)?;
    let next = if beta == 0.0 { phi.clone() } else { phi.axpy(-beta, &g.total)? };
    Ok((next, g))
}
