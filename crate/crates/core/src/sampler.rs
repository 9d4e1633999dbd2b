//! ADMM guided sampler plus the unconditional and DPS baselines.
//!
//! Every chain draws from its own RNG substream `(seed, chain)`; the first
//! draw is the initialization and, when noise is enabled, one Gaussian vector
//! per step follows. All three samplers consume randomness in that order, so
//! equal seeds give directly comparable trajectories.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::augmented_lagrangian;
use crate::error::{check_dim, Error, Result};
use crate::guidance::GuidanceModel;
use crate::numeric::{Rng, Vector};
use crate::prox::{reverse_step_with_score, GuidanceProx, ScoreMode, ScoreModeKind, DEFAULT_DIVERGENCE_BOUND};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::scores::{tweedie_with_score, ScoreModel};

/// Inner iteration count per step. The z-update runs `K_t + 1` gradient steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerIters {
    Constant(usize),
    /// `K_t = ceil(base + slope·(T - t))`.
    Linear {
        base: f64,
        slope: f64,
    },
}

impl Default for InnerIters {
    fn default() -> Self {
        InnerIters::Constant(5)
    }
}

impl InnerIters {
    pub fn at(&self, t: usize, steps: usize) -> usize {
        match *self {
            InnerIters::Constant(k) => k,
            InnerIters::Linear { base, slope } => {
                let k = (base + slope * (steps - t) as f64).ceil();
                if k > 0.0 {
                    k as usize
                } else {
                    0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaRule {
    /// Use `eta` as given.
    Fixed,
    /// `min(eta, 1/(ρ + L_c/ᾱ_{t-1}))`, with `L_c` the guidance smoothness bound.
    #[default]
    SmoothnessCapped,
}

fn default_rho() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    1.0
}
fn default_chains() -> usize {
    1
}
fn default_trace_chains() -> usize {
    1
}
fn default_divergence_bound() -> f64 {
    DEFAULT_DIVERGENCE_BOUND
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub eta_rule: EtaRule,
    #[serde(default)]
    pub inner_iters: InnerIters,
    #[serde(default)]
    pub noise_in_x_update: bool,
    #[serde(default)]
    pub score_mode: ScoreModeKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Chains (from index 0) whose full x/z/ν trajectories are kept.
    #[serde(default = "default_trace_chains")]
    pub trace_chains: usize,
    /// Double ρ when the primal residual exceeds 10× the dual one, halve it in
    /// the opposite case.
    #[serde(default)]
    pub rho_balancing: bool,
    #[serde(default = "default_divergence_bound")]
    pub divergence_bound: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            rho: default_rho(),
            eta: default_eta(),
            eta_rule: EtaRule::default(),
            inner_iters: InnerIters::default(),
            noise_in_x_update: false,
            score_mode: ScoreModeKind::default(),
            seed: 0,
            chains: default_chains(),
            trace_chains: default_trace_chains(),
            rho_balancing: false,
            divergence_bound: default_divergence_bound(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        if let InnerIters::Linear { base, slope } = self.inner_iters {
            if !(base >= 0.0 && slope >= 0.0) {
                return Err(Error::Config("inner_iters base and slope must be non-negative".into()));
            }
        }
        if !(self.divergence_bound > 0.0) {
            return Err(Error::Config("divergence_bound must be positive".into()));
        }
        Ok(())
    }

    /// Step size for the z-update at step `t`.
    pub fn eta_at(&self, rho: f64, guidance_smoothness: Option<f64>, abar_prev: f64) -> f64 {
        match (self.eta_rule, guidance_smoothness) {
            (EtaRule::SmoothnessCapped, Some(l)) => self.eta.min(1.0 / (rho + l / abar_prev)),
            _ => self.eta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Admm,
    Unconditional,
    Dps,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Admm => "admm",
            SamplerKind::Unconditional => "unconditional",
            SamplerKind::Dps => "dps",
        }
    }
}

/// One logged step of one chain. `t` is the step just taken, so the row
/// describes `(x_{t-1}, z_{t-1}, ν_{t-1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub chain: usize,
    pub t: usize,
    pub k: usize,
    /// `‖x_{t-1} - z_{t-1}‖`
    pub primal_res: f64,
    /// `ρ‖z_{t-1} - z_t‖`
    pub dual_res: f64,
    /// `log q(x_{t-1})` under the clean prior.
    pub log_q: f64,
    /// `log c(z̃₀(z_{t-1}))` at noise level ᾱ_{t-1}.
    pub log_c: f64,
    pub aug_lagrangian: f64,
    pub rho: f64,
    pub eta: f64,
    /// `‖x_{t-1} - x_t‖²`
    pub dx2: f64,
    /// `‖z_{t-1} - z_t‖²`
    pub dz2: f64,
    /// `‖u_t - x̃₀(u_t)‖²` for the prox input `u_t = z_t - ν_t/ρ`.
    pub prox_gap2: f64,
}

impl StepRow {
    pub fn movement(&self) -> f64 {
        self.dx2 + self.dz2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub chain: usize,
    pub x0: Vec<f64>,
    pub z0: Vec<f64>,
    pub failed: Option<String>,
}

/// Full trajectory of one chain, index 0 being the initialization at `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub chain: usize,
    pub initial_lagrangian: f64,
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
}

/// Chain-mean of the step log at one `t`, over chains that did not fail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub t: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub movement: f64,
    pub aug_lagrangian: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub sampler: SamplerKind,
    pub label: String,
    pub config: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    pub schedule: ScheduleSpec,
    pub dim: usize,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub failed_chains: usize,
    pub chains: Vec<ChainResult>,
    pub traces: Vec<ChainTrace>,
    pub step_summary: Vec<StepSummary>,
    /// Free-form context attached by the caller (task name, oracle info).
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
    /// Written to `steps.csv` rather than the JSON summary.
    #[serde(skip)]
    pub rows: Vec<StepRow>,
}

impl RunReport {
    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn ok_chains(&self) -> impl Iterator<Item = &ChainResult> {
        self.chains.iter().filter(|c| c.failed.is_none())
    }

    pub fn final_x(&self) -> Vec<Vector> {
        self.ok_chains().map(|c| Vector::from_vec(c.x0.clone())).collect()
    }

    pub fn final_z(&self) -> Vec<Vector> {
        self.ok_chains().map(|c| Vector::from_vec(c.z0.clone())).collect()
    }

    pub fn chain_rows(&self, chain: usize) -> Vec<&StepRow> {
        self.rows.iter().filter(|r| r.chain == chain).collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self)?;
        let report = dir.join("report.json");
        fs::write(&report, json).map_err(|e| Error::io(&report, e))?;
        self.write_steps_csv(&dir.join("steps.csv"))?;
        self.write_samples_csv(&dir.join("samples.csv"))
    }

    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        // Header even when empty.
        if self.rows.is_empty() {
            w.write_record(STEP_COLUMNS)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_samples_csv(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut header = vec!["chain".to_string(), "failed".to_string()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        header.extend((0..self.dim).map(|i| format!("z{i}")));
        let mut out = header.join(",");
        out.push('\n');
        for c in &self.chains {
            out.push_str(&format!("{},{}", c.chain, c.failed.is_some() as u8));
            for v in c.x0.iter().chain(&c.z0) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads `report.json` and the sibling `steps.csv` if present. Accepts the
    /// directory or the JSON path.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, json_path) = if path.is_dir() {
            (path.to_path_buf(), path.join("report.json"))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let mut report: RunReport = serde_json::from_str(&text)?;
        let steps = dir.join("steps.csv");
        if steps.exists() {
            let mut r = csv::Reader::from_path(&steps)?;
            report.rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        }
        Ok(report)
    }
}

const STEP_COLUMNS: [&str; 13] = [
    "chain",
    "t",
    "k",
    "primal_res",
    "dual_res",
    "log_q",
    "log_c",
    "aug_lagrangian",
    "rho",
    "eta",
    "dx2",
    "dz2",
    "prox_gap2",
];

struct ChainOutput {
    result: ChainResult,
    rows: Vec<StepRow>,
    trace: Option<ChainTrace>,
}

struct Tracer {
    initial_lagrangian: f64,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    nu: Vec<Vec<f64>>,
}

impl Tracer {
    fn push(&mut self, x: &Vector, z: &Vector, nu: &Vector) {
        self.x.push(x.as_slice().to_vec());
        self.z.push(z.as_slice().to_vec());
        self.nu.push(nu.as_slice().to_vec());
    }

    fn finish(self, chain: usize) -> ChainTrace {
        ChainTrace {
            chain,
            initial_lagrangian: self.initial_lagrangian,
            x: self.x,
            z: self.z,
            nu: self.nu,
        }
    }
}

fn finite_or_diverged(v: &Vector, bound: f64) -> Result<()> {
    let norm = v.norm();
    if norm <= bound {
        Ok(())
    } else {
        Err(Error::Diverged { norm, bound })
    }
}

fn summarize(rows: &[StepRow], chains: &[ChainResult], steps: usize) -> Vec<StepSummary> {
    let ok: Vec<bool> = chains.iter().map(|c| c.failed.is_none()).collect();
    let mut acc = vec![(0usize, 0.0, 0.0, 0.0, 0.0); steps + 1];
    for r in rows.iter().filter(|r| ok[r.chain]) {
        let a = &mut acc[r.t];
        a.0 += 1;
        a.1 += r.primal_res;
        a.2 += r.dual_res;
        a.3 += r.movement();
        a.4 += r.aug_lagrangian;
    }
    (1..=steps)
        .rev()
        .filter(|t| acc[*t].0 > 0)
        .map(|t| {
            let (n, p, d, m, l) = acc[t];
            let n = n as f64;
            StepSummary {
                t,
                primal_res: p / n,
                dual_res: d / n,
                movement: m / n,
                aug_lagrangian: l / n,
            }
        })
        .collect()
}

fn assemble(
    sampler: SamplerKind,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    zeta: Option<f64>,
    dim: usize,
    outputs: Vec<ChainOutput>,
    started: Instant,
) -> RunReport {
    let mut rows = Vec::new();
    let mut chains = Vec::with_capacity(outputs.len());
    let mut traces = Vec::new();
    for o in outputs {
        rows.extend(o.rows);
        chains.push(o.result);
        traces.extend(o.trace);
    }
    let step_summary = summarize(&rows, &chains, schedule.steps());
    RunReport {
        sampler,
        label: sampler.name().to_string(),
        config: cfg.clone(),
        zeta,
        schedule: schedule.spec().clone(),
        dim,
        seed: cfg.seed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        failed_chains: chains.iter().filter(|c| c.failed.is_some()).count(),
        chains,
        traces,
        step_summary,
        meta: Default::default(),
        rows,
    }
}

/// Runs the ADMM guided sampler on every chain.
pub fn run_admm(
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    guidance: &dyn GuidanceModel,
    cfg: &SamplerConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    let dim = model.dim();
    check_dim("guidance vs prior", dim, guidance.dim())?;
    let started = Instant::now();
    let outputs: Vec<ChainOutput> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| admm_chain(schedule, model, guidance, cfg, chain))
        .collect();
    Ok(assemble(SamplerKind::Admm, schedule, cfg, None, dim, outputs, started))
}

fn admm_chain(
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    guidance: &dyn GuidanceModel,
    cfg: &SamplerConfig,
    chain: usize,
) -> ChainOutput {
    let dim = model.dim();
    let steps = schedule.steps();
    let mut rng = Rng::substream(cfg.seed, chain as u64);
    let mut x = rng.gaussian_vec(dim);
    let mut z = x.clone();
    let mut nu = Vector::zeros(dim);
    let mut rho = cfg.rho;
    let l_c = guidance.smoothness_bound();
    let mut rows = Vec::with_capacity(steps);
    let mut tracer = (chain < cfg.trace_chains).then(|| Tracer {
        initial_lagrangian: augmented_lagrangian(model, guidance, &x, &z, &nu, rho).unwrap_or(f64::NAN),
        x: vec![x.as_slice().to_vec()],
        z: vec![z.as_slice().to_vec()],
        nu: vec![nu.as_slice().to_vec()],
    });

    let mut step = |t: usize, x: &mut Vector, z: &mut Vector, nu: &mut Vector, rho: &mut f64| -> Result<StepRow> {
        let abar = schedule.alpha_bar(t);
        let abar_prev = schedule.alpha_bar_prev(t);
        let u = &*z - &*nu / *rho;
        let s = model.score(&u, abar)?;
        let eps = cfg.noise_in_x_update.then(|| rng.gaussian_vec(dim));
        let x_new = reverse_step_with_score(schedule, &u, &s, t, eps.as_ref())?;
        finite_or_diverged(&x_new, cfg.divergence_bound)?;
        let prox_gap2 = (&u - tweedie_with_score(&u, &s, abar)).norm_squared();

        let eta = cfg.eta_at(*rho, l_c, abar_prev);
        let k = cfg.inner_iters.at(t, steps);
        let mode = match cfg.score_mode {
            ScoreModeKind::Frozen => ScoreMode::Frozen(s),
            ScoreModeKind::Live => ScoreMode::Live,
        };
        let z_new = GuidanceProx {
            guidance,
            model,
            x: &x_new,
            nu,
            rho: *rho,
            eta,
            iters: k,
            abar: abar_prev,
            mode: &mode,
            divergence_bound: cfg.divergence_bound,
        }
        .run(z)?;
        let nu_new = &*nu + (&x_new - &z_new) * *rho;

        let primal_res = (&x_new - &z_new).norm();
        let dz2 = (&z_new - &*z).norm_squared();
        let dual_res = *rho * dz2.sqrt();
        let z0 = match &mode {
            ScoreMode::Frozen(s) => tweedie_with_score(&z_new, s, abar_prev),
            ScoreMode::Live => crate::scores::tweedie_denoise(model, &z_new, abar_prev)?,
        };
        let row = StepRow {
            chain,
            t,
            k,
            primal_res,
            dual_res,
            log_q: model.log_density0(&x_new)?,
            log_c: guidance.log_c(&z0)?,
            aug_lagrangian: augmented_lagrangian(model, guidance, &x_new, &z_new, &nu_new, *rho)?,
            rho: *rho,
            eta,
            dx2: (&x_new - &*x).norm_squared(),
            dz2,
            prox_gap2,
        };
        *x = x_new;
        *z = z_new;
        *nu = nu_new;
        if cfg.rho_balancing {
            if primal_res > 10.0 * dual_res {
                *rho *= 2.0;
            } else if dual_res > 10.0 * primal_res {
                *rho /= 2.0;
            }
        }
        Ok(row)
    };

    let mut failed = None;
    for t in (1..=steps).rev() {
        match step(t, &mut x, &mut z, &mut nu, &mut rho) {
            Ok(row) => {
                rows.push(row);
                if let Some(tr) = tracer.as_mut() {
                    tr.push(&x, &z, &nu);
                }
            }
            Err(e) => {
                failed = Some(format!("step {t}: {e}"));
                break;
            }
        }
    }
    ChainOutput {
        result: ChainResult {
            chain,
            x0: x.as_slice().to_vec(),
            z0: z.as_slice().to_vec(),
            failed,
        },
        rows,
        trace: tracer.map(|t| t.finish(chain)),
    }
}

/// Plain reverse diffusion; noise follows `cfg.noise_in_x_update`.
pub fn run_unconditional(schedule: &NoiseSchedule, model: &dyn ScoreModel, cfg: &SamplerConfig) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let outputs: Vec<ChainOutput> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| single_chain(schedule, model, None, 0.0, cfg, chain))
        .collect();
    Ok(assemble(
        SamplerKind::Unconditional,
        schedule,
        cfg,
        None,
        model.dim(),
        outputs,
        started,
    ))
}

/// Reverse diffusion plus `ζ ∇_{x_t} log c(x̂₀(x_t))` with the frozen-score
/// Jacobian `1/√ᾱ_t`.
pub fn run_dps(
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    guidance: &dyn GuidanceModel,
    zeta: f64,
    cfg: &SamplerConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if !zeta.is_finite() || zeta < 0.0 {
        return Err(Error::Config(format!(
            "zeta must be finite and non-negative, got {zeta}"
        )));
    }
    check_dim("guidance vs prior", model.dim(), guidance.dim())?;
    let started = Instant::now();
    let outputs: Vec<ChainOutput> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| single_chain(schedule, model, Some(guidance), zeta, cfg, chain))
        .collect();
    Ok(assemble(
        SamplerKind::Dps,
        schedule,
        cfg,
        Some(zeta),
        model.dim(),
        outputs,
        started,
    ))
}

fn single_chain(
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    guidance: Option<&dyn GuidanceModel>,
    zeta: f64,
    cfg: &SamplerConfig,
    chain: usize,
) -> ChainOutput {
    let dim = model.dim();
    let steps = schedule.steps();
    let mut rng = Rng::substream(cfg.seed, chain as u64);
    let mut x = rng.gaussian_vec(dim);
    let zeros = Vector::zeros(dim);
    let mut rows = Vec::with_capacity(steps);
    let mut tracer = (chain < cfg.trace_chains).then(|| Tracer {
        initial_lagrangian: model.log_density0(&x).map(|v| -v).unwrap_or(f64::NAN),
        x: vec![x.as_slice().to_vec()],
        z: vec![x.as_slice().to_vec()],
        nu: vec![zeros.as_slice().to_vec()],
    });
    let active = guidance.filter(|g| zeta != 0.0 && !g.is_null());

    let mut step = |t: usize, x: &mut Vector| -> Result<StepRow> {
        let abar = schedule.alpha_bar(t);
        let s = model.score(x, abar)?;
        let eps = cfg.noise_in_x_update.then(|| rng.gaussian_vec(dim));
        let mut x_new = reverse_step_with_score(schedule, x, &s, t, eps.as_ref())?;
        if let Some(g) = active {
            let x0 = tweedie_with_score(x, &s, abar);
            x_new += g.grad_log_c(&x0)? * (zeta / abar.sqrt());
        }
        finite_or_diverged(&x_new, cfg.divergence_bound)?;
        let log_q = model.log_density0(&x_new)?;
        let log_c = match guidance {
            Some(g) => g.log_c(&x_new)?,
            None => 0.0,
        };
        let row = StepRow {
            chain,
            t,
            k: 0,
            primal_res: 0.0,
            dual_res: 0.0,
            log_q,
            log_c,
            aug_lagrangian: -log_q - log_c,
            rho: 0.0,
            eta: 0.0,
            dx2: (&x_new - &*x).norm_squared(),
            dz2: 0.0,
            prox_gap2: 0.0,
        };
        *x = x_new;
        Ok(row)
    };

    let mut failed = None;
    for t in (1..=steps).rev() {
        match step(t, &mut x) {
            Ok(row) => {
                rows.push(row);
                if let Some(tr) = tracer.as_mut() {
                    tr.push(&x, &x, &zeros);
                }
            }
            Err(e) => {
                failed = Some(format!("step {t}: {e}"));
                break;
            }
        }
    }
    ChainOutput {
        result: ChainResult {
            chain,
            x0: x.as_slice().to_vec(),
            z0: x.as_slice().to_vec(),
            failed,
        },
        rows,
        trace: tracer.map(|t| t.finish(chain)),
    }
}
