//! Reverse-mode automatic differentiation over dense tensors, plus
//! finite-difference helpers used for second-order terms and test oracles.

mod fd;
mod kernels;
mod tape;

pub use fd::{fd_directional, fd_mixed_hvp, finite_diff_grad, finite_diff_grad_params, DEFAULT_HVP_EPS};
pub use tape::{ParamVars, Tape, Var};
