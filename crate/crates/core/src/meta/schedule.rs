use crate::error::{Error, Result};

/// Inner (α) and outer (β) step sizes per iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LRSchedule {
    /// `base * (1 - t/T)^power`.
    Poly { alpha: f64, beta: f64, horizon: usize, power: f64 },
    /// Constant `min(1/L, c/√T)` for a fixed horizon `T`.
    Theorem { lipschitz: f64, c1: f64, c2: f64, horizon: usize },
}

impl LRSchedule {
    pub const POLY_POWER: f64 = 0.9;

    pub fn poly(alpha: f64, beta: f64, horizon: usize) -> Self {
        LRSchedule::Poly { alpha, beta, horizon, power: Self::POLY_POWER }
    }

    pub fn horizon(&self) -> usize {
        match *self {
            LRSchedule::Poly { horizon, .. } | LRSchedule::Theorem { horizon, .. } => horizon,
        }
    }

    /// `(α_t, β_t)`. Theorem mode requires `1 <= t <= T`; poly mode accepts
    /// `0 <= t <= T`.
    pub fn rates(&self, t: usize) -> Result<(f64, f64)> {
        match *self {
            LRSchedule::Poly { alpha, beta, horizon, power } => {
                if horizon == 0 || t > horizon {
                    return Err(Error::InvalidArgument(format!("iteration {t} outside poly horizon {horizon}")));
                }
                let f = (1.0 - t as f64 / horizon as f64).powf(power);
                Ok((alpha * f, beta * f))
            }
            LRSchedule::Theorem { lipschitz, c1, c2, horizon } => {
                if !(lipschitz > 0.0) {
                    return Err(Error::InvalidArgument(format!("smoothness constant must be positive, got {lipschitz}")));
                }
                if t == 0 || t > horizon {
                    return Err(Error::InvalidArgument(format!("iteration {t} outside 1..={horizon}")));
                }
                let root = (horizon as f64).sqrt();
                Ok(((1.0 / lipschitz).min(c1 / root), (1.0 / lipschitz).min(c2 / root)))
            }
        }
    }
}
