//! Proximal operators: closed forms, a brute-force numeric solver used as
//! the test oracle, the reverse-diffusion step read as an approximate prox,
//! and the inexact gradient-descent prox of the guidance term.
//!
//! Convention: `prox_{λf}(v) = argmin_x f(x) + ‖x - v‖² / (2λ)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::guidance::GuidanceModel;
use crate::numeric::Vector;
use crate::schedule::NoiseSchedule;
use crate::scores::{tweedie_denoise, tweedie_with_score, ScoreModel};

pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;

const NUMERIC_MAX_ITERS: usize = 200_000;

/// A differentiable objective for [`prox_numeric`].
pub trait SmoothFunction {
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
}

/// `‖x - mean‖² / (2 variance)`.
#[derive(Clone, Debug)]
pub struct QuadraticFn {
    pub mean: Vector,
    pub variance: f64,
}

impl SmoothFunction for QuadraticFn {
    fn value(&self, x: &Vector) -> f64 {
        (x - &self.mean).norm_squared() / (2.0 * self.variance)
    }
    fn gradient(&self, x: &Vector) -> Vector {
        (x - &self.mean) / self.variance
    }
}

pub struct ZeroFn;

impl SmoothFunction for ZeroFn {
    fn value(&self, _: &Vector) -> f64 {
        0.0
    }
    fn gradient(&self, x: &Vector) -> Vector {
        Vector::zeros(x.len())
    }
}

/// `-log p_ᾱ(x)` of a score model.
pub struct NegLogDensity<'a> {
    pub model: &'a dyn ScoreModel,
    pub abar: f64,
}

impl SmoothFunction for NegLogDensity<'_> {
    fn value(&self, x: &Vector) -> f64 {
        -self.model.log_density(x, self.abar).unwrap_or(f64::NAN)
    }
    fn gradient(&self, x: &Vector) -> Vector {
        -self
            .model
            .score(x, self.abar)
            .unwrap_or_else(|_| Vector::from_element(x.len(), f64::NAN))
    }
}

/// A prox subproblem. When `weak_convexity` (l) is known, λ must lie in (0, 1/l)
/// so the subproblem is strongly convex.
pub struct ProxProblem<'a> {
    pub objective: &'a dyn SmoothFunction,
    pub center: Vector,
    pub lambda: f64,
    pub weak_convexity: Option<f64>,
}

impl ProxProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} must be positive",
                self.lambda
            )));
        }
        if let Some(l) = self.weak_convexity {
            if l > 0.0 && self.lambda >= 1.0 / l {
                return Err(Error::InvalidArgument(format!(
                    "lambda {} not below 1/l = {}",
                    self.lambda,
                    1.0 / l
                )));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &Vector) -> f64 {
        self.objective.value(x) + (x - &self.center).norm_squared() / (2.0 * self.lambda)
    }

    /// Gradient of the prox objective; zero at the solution.
    pub fn residual(&self, x: &Vector) -> Vector {
        self.objective.gradient(x) + (x - &self.center) / self.lambda
    }

    pub fn solve(&self, tol: f64) -> Result<Vector> {
        self.validate()?;
        prox_numeric(self.objective, &self.center, self.lambda, tol)
    }
}

/// Closed-form prox of `‖x - mean‖² / (2 variance)`.
pub fn prox_quadratic(mean: &Vector, variance: f64, v: &Vector, lambda: f64) -> Result<Vector> {
    if !(variance > 0.0) || !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance {variance} and lambda {lambda} must be positive"
        )));
    }
    check_dim("prox_quadratic", mean.len(), v.len())?;
    Ok((v * variance + mean * lambda) / (variance + lambda))
}

/// Minimizes `f(x) + ‖x - v‖² / (2λ)` by gradient descent with
/// Barzilai-Borwein steps and an Armijo safeguard, stopping once the
/// objective gradient norm is at most `tol`.
pub fn prox_numeric(f: &dyn SmoothFunction, v: &Vector, lambda: f64, tol: f64) -> Result<Vector> {
    if !(lambda > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidArgument("lambda and tol must be positive".into()));
    }
    let h = |x: &Vector| f.value(x) + (x - v).norm_squared() / (2.0 * lambda);
    let grad = |x: &Vector| f.gradient(x) + (x - v) / lambda;

    let mut x = v.clone();
    let mut g = grad(&x);
    let mut hx = h(&x);
    let mut step = lambda;
    for _ in 0..NUMERIC_MAX_ITERS {
        let gnorm = g.norm();
        if gnorm <= tol {
            return Ok(x);
        }
        if !gnorm.is_finite() {
            break;
        }
        let mut trial_step = step;
        let (x_new, h_new) = loop {
            let cand = &x - &g * trial_step;
            let hc = h(&cand);
            if hc <= hx - 1e-4 * trial_step * gnorm * gnorm || trial_step < 1e-300 {
                break (cand, hc);
            }
            // Armijo can stall on round-off once the decrease is below machine precision.
            if (hx - hc).abs() <= 4.0 * f64::EPSILON * hx.abs().max(1.0) {
                break (cand, hc);
            }
            trial_step *= 0.5;
        };
        let g_new = grad(&x_new);
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        step = if sy > 0.0 { s.norm_squared() / sy } else { lambda };
        x = x_new;
        g = g_new;
        hx = h_new;
    }
    Err(Error::NotConverged {
        iterations: NUMERIC_MAX_ITERS,
        residual: g.norm(),
    })
}

/// One reverse-diffusion step read as an approximate prox of `-log p`:
/// `(v + β_t s(v, ᾱ_t)) / √α_t`, plus `√(β_t (1-ᾱ_{t-1})/(1-ᾱ_t)) · eps` when
/// `eps` is given.
pub fn diffusion_prox_step(
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    v: &Vector,
    t: usize,
    eps: Option<&Vector>,
) -> Result<Vector> {
    schedule.check_step(t)?;
    let score = model.score(v, schedule.alpha_bar(t))?;
    reverse_step_with_score(schedule, v, &score, t, eps)
}

/// [`diffusion_prox_step`] with a precomputed score at `(v, ᾱ_t)`.
pub fn reverse_step_with_score(
    schedule: &NoiseSchedule,
    v: &Vector,
    score: &Vector,
    t: usize,
    eps: Option<&Vector>,
) -> Result<Vector> {
    schedule.check_step(t)?;
    check_dim("reverse step score", v.len(), score.len())?;
    let mut out = (v + score * schedule.beta(t)) / schedule.alpha(t).sqrt();
    if let Some(e) = eps {
        check_dim("reverse step noise", v.len(), e.len())?;
        out += e * schedule.reverse_variance(t).sqrt();
    }
    Ok(out)
}

/// How the Tweedie estimate inside the z-update obtains its score.
#[derive(Clone, Debug, PartialEq)]
pub enum ScoreMode {
    /// Score evaluated once (at the x-update point) and held fixed.
    Frozen(Vector),
    /// Score re-evaluated at every inner iterate.
    Live,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModeKind {
    #[default]
    Frozen,
    Live,
}

/// Inexact prox of `-log c(z̃₀(z))` around `x + ν/ρ` by `iters + 1` gradient steps:
///
/// `z ← z - ηρ (z - x - ν/ρ) + η J ∇log c(z̃₀(z))`, `J = 1/√ᾱ`.
pub struct GuidanceProx<'a> {
    pub guidance: &'a dyn GuidanceModel,
    pub model: &'a dyn ScoreModel,
    pub x: &'a Vector,
    pub nu: &'a Vector,
    pub rho: f64,
    pub eta: f64,
    pub iters: usize,
    pub abar: f64,
    pub mode: &'a ScoreMode,
    pub divergence_bound: f64,
}

impl GuidanceProx<'_> {
    fn check(&self, z_init: &Vector) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho {} must be positive", self.rho)));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta {} must be non-negative", self.eta)));
        }
        let d = self.guidance.dim();
        check_dim("guidance prox z", d, z_init.len())?;
        check_dim("guidance prox x", d, self.x.len())?;
        check_dim("guidance prox nu", d, self.nu.len())?;
        check_dim("guidance prox model", d, self.model.dim())?;
        if let ScoreMode::Frozen(s) = self.mode {
            check_dim("guidance prox frozen score", d, s.len())?;
        }
        Ok(())
    }

    fn step(&self, z: &Vector, anchor: &Vector) -> Result<Vector> {
        let mut next = z - (z - anchor) * (self.eta * self.rho);
        if !self.guidance.is_null() && self.eta != 0.0 {
            let z0 = match self.mode {
                ScoreMode::Frozen(s) => tweedie_with_score(z, s, self.abar),
                ScoreMode::Live => tweedie_denoise(self.model, z, self.abar)?,
            };
            let g = self.guidance.grad_log_c(&z0)?;
            next += g * (self.eta / self.abar.sqrt());
        }
        let norm = next.norm();
        if !(norm <= self.divergence_bound) {
            return Err(Error::Diverged {
                norm,
                bound: self.divergence_bound,
            });
        }
        Ok(next)
    }

    pub fn run(&self, z_init: &Vector) -> Result<Vector> {
        self.check(z_init)?;
        let anchor = self.x + self.nu / self.rho;
        let mut z = z_init.clone();
        for _ in 0..=self.iters {
            z = self.step(&z, &anchor)?;
        }
        Ok(z)
    }

    /// All iterates `z^(0), ..., z^(iters+1)`.
    pub fn trace(&self, z_init: &Vector) -> Result<Vec<Vector>> {
        self.check(z_init)?;
        let anchor = self.x + self.nu / self.rho;
        let mut out = Vec::with_capacity(self.iters + 2);
        out.push(z_init.clone());
        for _ in 0..=self.iters {
            let next = self.step(out.last().expect("non-empty"), &anchor)?;
            out.push(next);
        }
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn guidance_prox_inexact(
    guidance: &dyn GuidanceModel,
    model: &dyn ScoreModel,
    z_init: &Vector,
    x: &Vector,
    nu: &Vector,
    rho: f64,
    eta: f64,
    iters: usize,
    abar: f64,
    mode: &ScoreMode,
) -> Result<Vector> {
    GuidanceProx {
        guidance,
        model,
        x,
        nu,
        rho,
        eta,
        iters,
        abar,
        mode,
        divergence_bound: DEFAULT_DIVERGENCE_BOUND,
    }
    .run(z_init)
}
