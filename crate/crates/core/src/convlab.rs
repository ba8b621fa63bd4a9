//! Quadratic bilevel problems with closed-form hypergradients, used to check
//! the engine and to measure the stochastic convergence rate.
//!
//! ```text
//! L_inner(ω, θ)   = ½ ωᵀAω + ωᵀBθ + bᵀω
//! ω*(θ, φ)        = φ - α (Aφ + Bθ + b)
//! L_outer1(ω*, θ) = ½ |ω* - w°|² + ½ μ |θ - t°|²
//! L_outer2(ω*)    = ½ |ω* - w°|²
//! ```

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::meta::{inner_step, mfl_hypergradient, mil_hypergradient, BilevelObjective, LRSchedule, LossGrads, MilOrder};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const THETA_ID: &str = "theta";
pub const OMEGA_ID: &str = "omega";
const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticBilevel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_vec: DVector<f64>,
    pub w_target: DVector<f64>,
    pub t_target: DVector<f64>,
    pub mu: f64,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

impl QuadraticBilevel {
    /// Random instance: `A = QΛQᵀ` with eigenvalues spread over
    /// `[1, condition]`, Gaussian coupling and targets.
    pub fn random(seed: u64, omega_dim: usize, theta_dim: usize, condition: f64) -> Result<Self> {
        if omega_dim == 0 || theta_dim == 0 || !(condition >= 1.0) {
            return Err(Error::InvalidArgument("dimensions must be positive and condition >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = gaussian_matrix(&mut rng, omega_dim, omega_dim, 1.0).qr().q();
        let eig = DVector::from_fn(omega_dim, |i, _| {
            if omega_dim == 1 {
                1.0
            } else {
                condition.powf(i as f64 / (omega_dim - 1) as f64)
            }
        });
        let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        Ok(Self {
            a,
            b: gaussian_matrix(&mut rng, omega_dim, theta_dim, 0.5),
            b_vec: gaussian_vector(&mut rng, omega_dim, 1.0),
            w_target: gaussian_vector(&mut rng, omega_dim, 1.0),
            t_target: gaussian_vector(&mut rng, theta_dim, 1.0),
            mu: 0.5,
        })
    }

    /// The lab's reference instance.
    pub fn default_instance() -> Self {
        Self::random(2024, 6, 4, 4.0).expect("valid parameters")
    }

    pub fn omega_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn theta_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn lambda_max_a(&self) -> f64 {
        self.a.symmetric_eigenvalues().max()
    }

    /// Smoothness constant of the joint outer objective, valid for every
    /// inner rate `α <= 1/λmax(A)`:
    /// `max(λmax(A), (|B|/λmax(A) + 1)² + μ)`.
    pub fn lipschitz(&self) -> f64 {
        let la = self.lambda_max_a();
        let nb = self.b.singular_values().max();
        la.max((nb / la + 1.0).powi(2) + self.mu)
    }

    pub fn inner_grad_omega(&self, omega: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        &self.a * omega + &self.b * theta + &self.b_vec
    }

    pub fn inner_loss(&self, omega: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        0.5 * omega.dot(&(&self.a * omega)) + omega.dot(&(&self.b * theta)) + self.b_vec.dot(omega)
    }

    pub fn omega_star(&self, omega: &DVector<f64>, theta: &DVector<f64>, alpha: f64) -> DVector<f64> {
        omega - self.inner_grad_omega(omega, theta) * alpha
    }

    pub fn outer1_loss(&self, omega_star: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        self.outer2_loss(omega_star) + 0.5 * self.mu * (theta - &self.t_target).norm_squared()
    }

    pub fn outer2_loss(&self, omega_star: &DVector<f64>) -> f64 {
        0.5 * (omega_star - &self.w_target).norm_squared()
    }

    /// `d/dθ L_outer1(ω - α ∇_ω L_inner(ω, θ), θ) = μ(θ - t°) - α Bᵀ(ω* - w°)`.
    pub fn exact_hypergradient(&self, theta: &DVector<f64>, omega: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let ws = self.omega_star(omega, theta, alpha);
        (theta - &self.t_target) * self.mu - self.b.transpose() * (ws - &self.w_target) * alpha
    }

    /// `d/dφ L_outer2(φ - α ∇_ω L_inner(φ, θ)) = (I - αA)(ω* - w°)`.
    pub fn exact_head_gradient(&self, theta: &DVector<f64>, phi: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let ws = self.omega_star(phi, theta, alpha);
        let r = ws - &self.w_target;
        &r - &self.a * &r * alpha
    }

    /// Hypergradient by forward-mode differentiation of the unrolled inner
    /// step, one dual seed per θ coordinate.
    pub fn unrolled_hypergradient(&self, theta: &DVector<f64>, omega: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let (n, m) = (self.omega_dim(), self.theta_dim());
        DVector::from_fn(m, |j, _| {
            let th: Vec<Dual> = (0..m).map(|k| Dual::new(theta[k], if k == j { 1.0 } else { 0.0 })).collect();
            let mut loss = Dual::constant(0.0);
            for i in 0..n {
                let mut g = Dual::constant(self.b_vec[i]);
                for k in 0..n {
                    g = g + Dual::constant(self.a[(i, k)] * omega[k]);
                }
                for (k, t) in th.iter().enumerate() {
                    g = g + *t * self.b[(i, k)];
                }
                let ws = Dual::constant(omega[i]) - g * alpha;
                let r = ws - Dual::constant(self.w_target[i]);
                loss = loss + r * r * 0.5;
            }
            for (k, t) in th.iter().enumerate() {
                let d = *t - Dual::constant(self.t_target[k]);
                loss = loss + d * d * (0.5 * self.mu);
            }
            loss.du
        })
    }

    pub fn theta_params(&self, theta: &DVector<f64>) -> ParamSet {
        ParamSet::single(THETA_ID, Tensor::from_vec(theta.as_slice().to_vec()))
    }

    pub fn omega_params(&self, omega: &DVector<f64>) -> ParamSet {
        ParamSet::single(OMEGA_ID, Tensor::from_vec(omega.as_slice().to_vec()))
    }
}

fn vector(p: &ParamSet, id: &str) -> Result<DVector<f64>> {
    Ok(DVector::from_column_slice(p.require(id)?.data()))
}

fn grads(loss: f64, theta: DVector<f64>, omega: DVector<f64>) -> LossGrads {
    LossGrads {
        loss,
        theta: ParamSet::single(THETA_ID, Tensor::from_vec(theta.as_slice().to_vec())),
        omega: ParamSet::single(OMEGA_ID, Tensor::from_vec(omega.as_slice().to_vec())),
    }
}

impl BilevelObjective for QuadraticBilevel {
    type Batch = ();
    type Aux = ();

    fn inner(&self, theta: &ParamSet, omega: &ParamSet, _: &()) -> Result<LossGrads> {
        let (t, w) = (vector(theta, THETA_ID)?, vector(omega, OMEGA_ID)?);
        Ok(grads(self.inner_loss(&w, &t), self.b.transpose() * &w, self.inner_grad_omega(&w, &t)))
    }

    fn outer1(&self, theta: &ParamSet, omega: &ParamSet, _: &[()]) -> Result<(LossGrads, ())> {
        let (t, w) = (vector(theta, THETA_ID)?, vector(omega, OMEGA_ID)?);
        let gt = (&t - &self.t_target) * self.mu;
        Ok((grads(self.outer1_loss(&w, &t), gt, &w - &self.w_target), ()))
    }

    fn outer2(&self, theta: &ParamSet, omega: &ParamSet, _: &[()]) -> Result<LossGrads> {
        let w = vector(omega, OMEGA_ID)?;
        Ok(grads(self.outer2_loss(&w), DVector::zeros(theta.numel()), &w - &self.w_target))
    }
}

/// First-order dual number `re + du·ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }

    pub fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl std::ops::Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, k: f64) -> Dual {
        Dual::new(self.re * k, self.du * k)
    }
}

/// Zero-mean Gaussian vector with `E|ψ|² = σ²`.
pub fn noise_sample<R: Rng>(rng: &mut R, dim: usize, sigma: f64) -> DVector<f64> {
    let s = sigma / (dim as f64).sqrt();
    gaussian_vector(rng, dim, s)
}

/// Per-iteration record of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTrace {
    /// `|∇_θ L_outer1(ω*(θ_t, φ_t), θ_t)|²`, exact.
    pub theta_grad_sq: Vec<f64>,
    /// `|∇_φ L_outer2(ω*(θ_t, φ_t))|²`, exact.
    pub phi_grad_sq: Vec<f64>,
    pub outer1_loss: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.theta_grad_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_grad_sq.is_empty()
    }

    pub fn min_theta(&self) -> f64 {
        self.theta_grad_sq.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_phi(&self) -> f64 {
        self.phi_grad_sq.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest gradient norm seen along the run (ρ estimate).
    pub fn max_grad_norm(&self) -> f64 {
        self.theta_grad_sq.iter().chain(&self.phi_grad_sq).copied().fold(0.0, f64::max).sqrt()
    }

    /// CSV `t,grad_norm_sq,phi_grad_norm_sq,loss,alpha_t,beta_t`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,grad_norm_sq,phi_grad_norm_sq,loss,alpha_t,beta_t\n");
        for t in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e}",
                t + 1,
                self.theta_grad_sq[t],
                self.phi_grad_sq[t],
                self.outer1_loss[t],
                self.alpha[t],
                self.beta[t]
            );
        }
        out
    }
}

/// Runs `T` joint iterations from the origin through the engine: the θ step
/// uses the MFL hypergradient, the φ step the second-order head gradient,
/// each perturbed by independent noise of variance σ².
pub fn run_trace(problem: &QuadraticBilevel, schedule: &LRSchedule, sigma: f64, seed: u64) -> Result<ConvergenceTrace> {
    let horizon = schedule.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = problem.theta_params(&DVector::zeros(problem.theta_dim()));
    let mut phi = problem.omega_params(&DVector::zeros(problem.omega_dim()));
    let mut trace = ConvergenceTrace {
        theta_grad_sq: Vec::with_capacity(horizon),
        phi_grad_sq: Vec::with_capacity(horizon),
        outer1_loss: Vec::with_capacity(horizon),
        alpha: Vec::with_capacity(horizon),
        beta: Vec::with_capacity(horizon),
    };
    let order = MilOrder::second();
    for t in 1..=horizon {
        let (alpha, beta) = schedule.rates(t)?;
        let inner = inner_step(problem, &theta, &phi, &(), alpha)?;
        let hg = mfl_hypergradient(problem, &theta, &phi, &inner.omega_star, &(), &[()], alpha, 1e-3)?;
        let mg = mil_hypergradient(problem, &theta, &phi, &inner.omega_star, &(), &[()], alpha, order, 1e-3)?;

        let (tv, pv) = (vector(&theta, THETA_ID)?, vector(&phi, OMEGA_ID)?);
        let gt = problem.exact_hypergradient(&tv, &pv, alpha);
        let gp = problem.exact_head_gradient(&tv, &pv, alpha);
        trace.theta_grad_sq.push(gt.norm_squared());
        trace.phi_grad_sq.push(gp.norm_squared());
        trace.outer1_loss.push(hg.outer_loss);
        trace.alpha.push(alpha);
        trace.beta.push(beta);
        if !(gt.norm() < DIVERGENCE_NORM && gp.norm() < DIVERGENCE_NORM) {
            return Err(Error::Divergence(format!("gradient norm exceeded {DIVERGENCE_NORM:e} at t = {t}")));
        }

        let nt = noise_sample(&mut rng, problem.theta_dim(), sigma);
        let np = noise_sample(&mut rng, problem.omega_dim(), sigma);
        let step_t = hg.total.axpy(1.0, &problem.theta_params(&nt))?;
        let step_p = mg.total.axpy(1.0, &problem.omega_params(&np))?;
        theta = theta.axpy(-beta, &step_t)?;
        phi = phi.axpy(-beta, &step_p)?;
    }
    Ok(trace)
}

/// Ensemble mean over repeats of `min_t |∇|²` for one horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct RatePoint {
    pub horizon: usize,
    pub theta_min_grad_sq: f64,
    pub phi_min_grad_sq: f64,
    /// Largest gradient norm over all repeats.
    pub rho: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateConfig {
    pub sigma: f64,
    pub repeats: usize,
    pub c1: f64,
    pub c2: f64,
    pub seed: u64,
}

impl RateConfig {
    /// Step constants chosen so that `c/√T <= 1/L` from `T = 100` on.
    pub fn for_problem(problem: &QuadraticBilevel, sigma: f64, repeats: usize, seed: u64) -> Self {
        let c = 5.0 / problem.lipschitz();
        Self { sigma, repeats, c1: c, c2: c, seed }
    }
}

pub fn run_rate_experiment(problem: &QuadraticBilevel, horizons: &[usize], config: &RateConfig) -> Result<Vec<RatePoint>> {
    if config.repeats == 0 {
        return Err(Error::InvalidArgument("at least one repeat is needed".into()));
    }
    let lipschitz = problem.lipschitz();
    horizons
        .iter()
        .map(|&horizon| {
            let schedule = LRSchedule::Theorem { lipschitz, c1: config.c1, c2: config.c2, horizon };
            let (mut st, mut sp, mut rho) = (0.0, 0.0, 0.0f64);
            for r in 0..config.repeats {
                let seed = config.seed.wrapping_mul(0x9e37_79b9).wrapping_add((horizon * 1000 + r) as u64);
                let trace = run_trace(problem, &schedule, config.sigma, seed)?;
                st += trace.min_theta();
                sp += trace.min_phi();
                rho = rho.max(trace.max_grad_norm());
            }
            let n = config.repeats as f64;
            Ok(RatePoint { horizon, theta_min_grad_sq: st / n, phi_min_grad_sq: sp / n, rho })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    /// Least-squares slope of `log y` against `log T`.
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    /// Smallest `C` with `y <= C/√T` at every horizon.
    pub c_fit: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const SLOPE_TOLERANCE: f64 = -0.45;

/// Fits `y ≈ C T^slope` and passes when the slope is at most the tolerance.
pub fn verify_bound(points: &[(usize, f64)], tolerance: f64) -> Result<BoundReport> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 horizons, got {}", points.len())));
    }
    if points.iter().any(|&(t, y)| t == 0 || !(y > 0.0) || !y.is_finite()) {
        return Err(Error::InvalidArgument("horizons and values must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|&(t, _)| (t as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, y)| y.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    let c_fit = points.iter().map(|&(t, y)| y * (t as f64).sqrt()).fold(0.0, f64::max);
    Ok(BoundReport { slope, intercept, residual, c_fit, tolerance, pass: slope <= tolerance })
}

impl BoundReport {
    pub fn render(&self, label: &str) -> String {
        format!(
            "{label}: slope {:.4} (tolerance {:.2}), residual {:.3e}, C_fit {:.4e}, {}",
            self.slope,
            self.tolerance,
            self.residual,
            self.c_fit,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::mfl_outer_step;

    #[test]
    fn decoupled_and_zero_rate_cases() {
        let mut p = QuadraticBilevel::random(1, 3, 2, 3.0).unwrap();
        let theta = DVector::from_vec(vec![0.3, -0.2]);
        let omega = DVector::from_vec(vec![1.0, 0.5, -1.0]);
        let at_zero = p.exact_hypergradient(&theta, &omega, 0.0);
        assert_eq!(at_zero, (&theta - &p.t_target) * p.mu);
        p.b.fill(0.0);
        assert_eq!(p.exact_hypergradient(&theta, &omega, 0.4), (&theta - &p.t_target) * p.mu);
    }

    #[test]
    fn closed_form_matches_dual_unrolling() {
        for seed in 0..10 {
            let p = QuadraticBilevel::random(seed, 5, 3, 10.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let theta = gaussian_vector(&mut rng, 3, 1.0);
            let omega = gaussian_vector(&mut rng, 5, 1.0);
            let exact = p.exact_hypergradient(&theta, &omega, 0.07);
            let unrolled = p.unrolled_hypergradient(&theta, &omega, 0.07);
            assert!((&exact - &unrolled).norm() <= 1e-10 * exact.norm(), "seed {seed}");
        }
    }

    #[test]
    fn engine_step_matches_closed_form() {
        let p = QuadraticBilevel::random(3, 4, 3, 5.0).unwrap();
        let theta = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let omega = DVector::from_vec(vec![1.0, -1.0, 0.5, 0.0]);
        let (t, w) = (p.theta_params(&theta), p.omega_params(&omega));
        let alpha = 0.1;
        let star = inner_step(&p, &t, &w, &(), alpha).unwrap().omega_star;
        let (next, _) = mfl_outer_step(&p, &t, &w, &star, &(), &[()], alpha, 0.5, 1e-3).unwrap();
        let want = &theta - p.exact_hypergradient(&theta, &omega, alpha) * 0.5;
        let got = vector(&next, THETA_ID).unwrap();
        assert!((got - want).norm() < 1e-9);
    }

    #[test]
    fn noise_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut sum = DVector::zeros(4);
        let mut sq = 0.0;
        for _ in 0..n {
            let v = noise_sample(&mut rng, 4, 2.0);
            sq += v.norm_squared();
            sum += v;
        }
        // per-coordinate std is 1, so the mean has standard error 1/√n
        let se = 1.0 / (n as f64).sqrt();
        assert!(sum.iter().all(|s| (s / n as f64).abs() < 4.0 * se));
        assert!((sq / n as f64 - 4.0).abs() < 0.1);
    }

    #[test]
    fn bound_fit_fixtures() {
        let exact: Vec<(usize, f64)> = [100, 1000, 10_000].iter().map(|&t| (t, 3.0 / (t as f64).sqrt())).collect();
        let r = verify_bound(&exact, SLOPE_TOLERANCE).unwrap();
        assert!((r.slope + 0.5).abs() < 1e-12 && r.residual < 1e-12 && r.pass);
        assert!((r.c_fit - 3.0).abs() < 1e-12);
        let flat: Vec<(usize, f64)> = [100, 1000, 10_000].iter().map(|&t| (t, 0.2)).collect();
        let r = verify_bound(&flat, SLOPE_TOLERANCE).unwrap();
        assert!(r.slope.abs() < 1e-12 && !r.pass);
        assert!(verify_bound(&exact[..2], SLOPE_TOLERANCE).is_err());
    }

    #[test]
    fn noiseless_run_descends() {
        let p = QuadraticBilevel::default_instance();
        let s = LRSchedule::Theorem { lipschitz: p.lipschitz(), c1: 1.0, c2: 1.0, horizon: 200 };
        let trace = run_trace(&p, &s, 0.0, 0).unwrap();
        let mut best = f64::INFINITY;
        for (t, &g) in trace.theta_grad_sq.iter().enumerate() {
            if t > 0 {
                assert!(g + trace.phi_grad_sq[t] <= best * (1.0 + 1e-12), "t = {t}");
            }
            best = best.min(g + trace.phi_grad_sq[t]);
        }
    }
}
