//! Post-hoc checks of the convergence theory against run reports: the
//! augmented Lagrangian, the per-step sufficient-decrease inequality, the
//! o(1/T) rate probe, residual extraction and the Robbins-Siegmund recursion.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::guidance::GuidanceModel;
use crate::numeric::{sym_eigen, Rng, Vector};
use crate::prox::{prox_numeric, NegLogDensity, SmoothFunction};
use crate::sampler::{ChainTrace, RunReport};
use crate::schedule::NoiseSchedule;
use crate::scores::{tweedie_denoise, MixtureScoreModel, ScoreModel};

/// `-log q(x) - log c(z) + ⟨ν, x - z⟩ + (ρ/2)‖x - z‖²`.
pub fn augmented_lagrangian(
    model: &dyn ScoreModel,
    guidance: &dyn GuidanceModel,
    x: &Vector,
    z: &Vector,
    nu: &Vector,
    rho: f64,
) -> Result<f64> {
    check_dim("lagrangian z", x.len(), z.len())?;
    check_dim("lagrangian nu", x.len(), nu.len())?;
    let r = x - z;
    Ok(-model.log_density0(x)? - guidance.log_c(z)? + nu.dot(&r) + 0.5 * rho * r.norm_squared())
}

/// Constants of the convergence analysis for smoothness `l`, penalty `rho`,
/// dimension `dim` and score gap `delta` (zero for analytic scores).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub l: f64,
    pub rho: f64,
    pub delta: f64,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regimes {
    /// Subproblems strongly convex.
    pub rho_gt_l: bool,
    pub rho_gt_6l: bool,
    pub rho_le_inv_6l: bool,
}

impl TheoryConstants {
    pub fn new(l: f64, rho: f64, dim: usize) -> Result<Self> {
        if !(l >= 0.0 && rho > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need l >= 0 and rho > 0, got {l}, {rho}"
            )));
        }
        Ok(Self {
            l,
            rho,
            delta: 0.0,
            dim,
        })
    }

    pub fn q_f(&self) -> f64 {
        (self.rho - self.l) / (self.rho + self.l)
    }

    pub fn c1(&self) -> f64 {
        self.l
    }

    pub fn c2(&self) -> f64 {
        (self.l * self.l + self.rho * self.rho) / 2.0 + self.c3()
    }

    pub fn c3(&self) -> f64 {
        3.0 * (self.l + self.rho).powi(2) / self.rho
    }

    /// Defined only for ρ > L.
    pub fn c4(&self) -> Option<f64> {
        (self.rho > self.l).then(|| (self.rho + self.l) / (self.rho - self.l))
    }

    /// `√d (2L/(ρ+L))^K`.
    pub fn contraction_bound(&self, k: usize) -> f64 {
        (self.dim as f64).sqrt() * (2.0 * self.l / (self.rho + self.l)).powi(k as i32)
    }

    /// `δ + (L/2)((Q_f-1)/(Q_f+1))² gap2`, with `gap2 = ‖x - x̃₀‖²`.
    pub fn delta_t(&self, gap2: f64) -> f64 {
        let q = self.q_f();
        let ratio = (q - 1.0) / (q + 1.0);
        self.delta + 0.5 * self.l * ratio * ratio * gap2
    }

    pub fn regimes(&self) -> Regimes {
        Regimes {
            rho_gt_l: self.rho > self.l,
            rho_gt_6l: self.rho > 6.0 * self.l,
            rho_le_inv_6l: self.l > 0.0 && self.rho <= 1.0 / (6.0 * self.l),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseSummary {
    pub applicable: bool,
    pub note: String,
    pub regimes: Regimes,
    pub steps: usize,
    pub violations: usize,
    pub worst_slack: f64,
    /// Per-step `rhs - lhs`, in step order `t = T..1`.
    pub slacks: Vec<f64>,
}

/// Checks `c₁ m_k + L_{k+1} ≤ L_k + c₂Δ_k² + c₃Δ_{k-1}² + c₄δ_k` along the
/// traced chain `chain`, with `Δ_{-1} = √d` and `δ_k` evaluated at the prox
/// input with the Tweedie estimate as `x̃₀`. A step violates when its slack is
/// below `-1e-9·max(1, |L_k|)`.
pub fn check_sufficient_decrease(report: &RunReport, consts: &TheoryConstants, chain: usize) -> DecreaseSummary {
    let regimes = consts.regimes();
    let mut out = DecreaseSummary {
        applicable: false,
        note: String::new(),
        regimes,
        steps: 0,
        violations: 0,
        worst_slack: f64::NAN,
        slacks: Vec::new(),
    };
    let Some(c4) = consts.c4() else {
        out.note = format!("not applicable: rho {} <= L {}", consts.rho, consts.l);
        return out;
    };
    let Some(trace) = report.traces.iter().find(|t| t.chain == chain) else {
        out.note = format!("not applicable: chain {chain} has no trace");
        return out;
    };
    let rows = report.chain_rows(chain);
    if rows.is_empty() {
        out.note = "not applicable: no logged steps".into();
        return out;
    }
    let (c1, c2, c3) = (consts.c1(), consts.c2(), consts.c3());
    let mut prev_lag = trace.initial_lagrangian;
    let mut prev_delta = (consts.dim as f64).sqrt();
    let mut worst = f64::INFINITY;
    for r in rows {
        let big_delta = consts.contraction_bound(r.k);
        let rhs =
            prev_lag + c2 * big_delta * big_delta + c3 * prev_delta * prev_delta + c4 * consts.delta_t(r.prox_gap2);
        let lhs = c1 * r.movement() + r.aug_lagrangian;
        let slack = rhs - lhs;
        if slack < -1e-9 * prev_lag.abs().max(1.0) {
            out.violations += 1;
        }
        worst = worst.min(slack);
        out.slacks.push(slack);
        prev_lag = r.aug_lagrangian;
        prev_delta = big_delta;
    }
    out.applicable = true;
    out.steps = out.slacks.len();
    out.worst_slack = worst;
    out.note = if regimes.rho_gt_6l {
        "rho > 6L".into()
    } else {
        "L < rho <= 6L: outside the rho > 6L hypothesis".into()
    };
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub steps: usize,
    pub min_movement: f64,
    pub scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub verdict: Verdict,
    /// `T·min_j m_j` never grows by more than 10% from one grid point to the next.
    pub scaled_non_increasing: bool,
}

/// `m_j = ‖z_{j+1} - z_j‖² + ‖x_{j+1} - x_j‖²`, averaged over chains; returns `min_j m_j`.
pub fn min_movement(report: &RunReport) -> f64 {
    report
        .step_summary
        .iter()
        .map(|s| s.movement)
        .fold(f64::INFINITY, f64::min)
}

pub fn rate_estimate(reports: &[RunReport]) -> Result<RateEstimate> {
    let points: Vec<(usize, f64)> = reports.iter().map(|r| (r.steps(), min_movement(r))).collect();
    rate_from_points(&points)
}

/// Least-squares slope of `log min m` against `log T`; PASS at slope ≤ -0.85.
pub fn rate_from_points(points: &[(usize, f64)]) -> Result<RateEstimate> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rate estimation needs at least 3 step counts, got {}",
            points.len()
        )));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.0);
    if sorted.iter().any(|p| !(p.1 > 0.0) || !p.1.is_finite()) {
        return Err(Error::InvalidArgument(
            "movement minima must be positive and finite".into(),
        ));
    }
    let xs: Vec<f64> = sorted.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = sorted.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("step counts must differ".into()));
    }
    let slope = sxy / sxx;
    let points: Vec<RatePoint> = sorted
        .iter()
        .map(|&(steps, m)| RatePoint {
            steps,
            min_movement: m,
            scaled: steps as f64 * m,
        })
        .collect();
    let scaled_non_increasing = points.windows(2).all(|w| w[1].scaled <= 1.1 * w[0].scaled);
    Ok(RateEstimate {
        points,
        slope,
        verdict: if slope <= -0.85 { Verdict::Pass } else { Verdict::Fail },
        scaled_non_increasing,
    })
}

/// Primal `‖x - z‖` and dual `ρ‖Δz‖` series of one chain, in step order.
pub fn residual_series(report: &RunReport, chain: usize) -> (Vec<f64>, Vec<f64>) {
    report
        .chain_rows(chain)
        .into_iter()
        .map(|r| (r.primal_res, r.dual_res))
        .unzip()
}

/// `‖ν_{t-1} - ν_t‖` recomputed from a trace; equals ρ times the primal residual.
pub fn dual_increments(trace: &ChainTrace) -> Vec<f64> {
    trace
        .nu
        .windows(2)
        .map(|w| {
            w[1].iter()
                .zip(&w[0])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Largest relative gap between the logged Lagrangian and one recomputed from
/// the traced `(x, z, ν)`.
pub fn lagrangian_consistency(
    report: &RunReport,
    model: &dyn ScoreModel,
    guidance: &dyn GuidanceModel,
    chain: usize,
) -> Result<f64> {
    let trace = report
        .traces
        .iter()
        .find(|t| t.chain == chain)
        .ok_or_else(|| Error::InvalidArgument(format!("chain {chain} has no trace")))?;
    let rows = report.chain_rows(chain);
    let mut worst: f64 = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let x = Vector::from_column_slice(&trace.x[i + 1]);
        let z = Vector::from_column_slice(&trace.z[i + 1]);
        let nu = Vector::from_column_slice(&trace.nu[i + 1]);
        let v = augmented_lagrangian(model, guidance, &x, &z, &nu, r.rho)?;
        worst = worst.max((v - r.aug_lagrangian).abs() / r.aug_lagrangian.abs().max(1e-300));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobbinsSiegmund {
    pub lambdas: Vec<f64>,
    pub holds: bool,
}

/// Runs `λ_{k+1} = (1 - w_k)λ_k + w_k m_k`, `w_k = 2/(k+1)` from `k = 1`, so each
/// `λ_{k+1}` is a convex combination of `m_1..m_k` and must dominate their minimum.
pub fn robbins_siegmund(m: &[f64]) -> RobbinsSiegmund {
    let mut lambdas = Vec::with_capacity(m.len());
    let mut lambda = 0.0;
    let mut running_min = f64::INFINITY;
    let mut holds = true;
    for (i, &mk) in m.iter().enumerate() {
        let k = (i + 1) as f64;
        let w = 2.0 / (k + 1.0);
        lambda = (1.0 - w) * lambda + w * mk;
        running_min = running_min.min(mk);
        if running_min > lambda + 1e-12 * lambda.abs().max(running_min.abs()) {
            holds = false;
        }
        lambdas.push(lambda);
    }
    RobbinsSiegmund { lambdas, holds }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Point {
    pub t: usize,
    /// Objective at the rescaled reverse-step output minus the exact minimum.
    pub excess: f64,
    pub bound: f64,
    pub ok: bool,
}

/// Compares the reverse step at `v` against the exact prox
/// `argmin -log p_{ᾱ_t}(x) + ‖x - v‖²/(2ρ)`, `ρ = β_t/(1-β_t)`.
/// The bound is `δ_t` with `δ = 0`, smoothness `l`, and `x̃₀` the Tweedie
/// estimate at `v`.
pub fn theorem1_check(
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    v: &Vector,
    t: usize,
    l: f64,
    tol: f64,
) -> Result<Theorem1Point> {
    schedule.check_step(t)?;
    let beta = schedule.beta(t);
    let rho = beta / (1.0 - beta);
    let abar = schedule.alpha_bar(t);
    let f = NegLogDensity { model, abar };
    let lambda = rho;
    let objective = |x: &Vector| f.value(x) + (x - v).norm_squared() / (2.0 * lambda);
    let exact = prox_numeric(&f, v, lambda, tol)?;
    // The reverse step rescaled by √α_t.
    let candidate = v + model.score(v, abar)? * beta;
    let excess = objective(&candidate) - objective(&exact);
    let x0 = tweedie_denoise(model, v, abar)?;
    let consts = TheoryConstants::new(l, rho, v.len())?;
    let bound = consts.delta_t((v - x0).norm_squared());
    let slack = 1e-12 * objective(&exact).abs().max(1.0);
    Ok(Theorem1Point {
        t,
        excess,
        bound,
        ok: excess <= bound + slack,
    })
}

/// Smoothness of `-log p` for a mixture: largest Hessian spectral norm at
/// `samples` prior draws, times 1.2.
pub fn estimate_mixture_smoothness(model: &MixtureScoreModel, samples: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = model.sample(&mut rng);
        let h = model.neg_log_hessian(&x, 1.0);
        let eig = sym_eigen(&h);
        worst = eig.eigenvalues.iter().fold(worst, |m, v| m.max(v.abs()));
    }
    1.2 * worst
}
