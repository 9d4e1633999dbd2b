//! Python bindings. Vectors cross the boundary as lists of floats.

use ::guided_admm::guidance::{
    GuidanceModel, LinearGaussianGuidance as CoreLinearGuidance, LinearOperator, NullGuidance,
};
use ::guided_admm::numeric::{Matrix, Vector};
use ::guided_admm::prox::{self, ScoreModeKind};
use ::guided_admm::sampler::{self, InnerIters, RunReport, SamplerConfig};
use ::guided_admm::schedule::{self, NoiseSchedule};
use ::guided_admm::scores::{tweedie_denoise, GaussianScoreModel, MixtureScoreModel, Prior, ScoreModel};
use ::guided_admm::tasks::{self, OracleResult, Task};
use ::guided_admm::Error;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vec_of(x: Vec<f64>) -> Vector {
    Vector::from_vec(x)
}

fn list_of(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

fn matrix_of(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(Matrix::from_fn(n, m, |i, j| rows[i][j]))
}

#[pyclass(name = "Schedule", frozen)]
struct PySchedule(NoiseSchedule);

#[pymethods]
impl PySchedule {
    #[staticmethod]
    #[pyo3(signature = (steps, beta_start = 1e-4, beta_end = 0.02))]
    fn linear(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        schedule::make_linear_schedule(steps, beta_start, beta_end)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn from_betas(betas: Vec<f64>) -> PyResult<Self> {
        NoiseSchedule::from_betas(betas).map(Self).map_err(err)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    fn betas(&self) -> Vec<f64> {
        self.0.betas().to_vec()
    }

    fn alpha_bars(&self) -> Vec<f64> {
        self.0.alpha_bars().to_vec()
    }
}

/// Gaussian or mixture prior with analytic scores at every noise level.
#[pyclass(name = "Prior", frozen)]
struct PyPrior(Prior);

#[pymethods]
impl PyPrior {
    #[staticmethod]
    fn gaussian(mean: Vec<f64>, variance: f64) -> PyResult<Self> {
        GaussianScoreModel::new(vec_of(mean), variance)
            .map(|m| Self(Prior::Gaussian(m)))
            .map_err(err)
    }

    #[staticmethod]
    fn mixture(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> PyResult<Self> {
        MixtureScoreModel::new(weights, means.into_iter().map(vec_of).collect(), variances)
            .map(|m| Self(Prior::Mixture(m)))
            .map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn score(&self, x: Vec<f64>, abar: f64) -> PyResult<Vec<f64>> {
        self.0.score(&vec_of(x), abar).map(|s| list_of(&s)).map_err(err)
    }

    fn log_density(&self, x: Vec<f64>, abar: f64) -> PyResult<f64> {
        self.0.log_density(&vec_of(x), abar).map_err(err)
    }

    fn tweedie(&self, x: Vec<f64>, abar: f64) -> PyResult<Vec<f64>> {
        tweedie_denoise(&self.0, &vec_of(x), abar)
            .map(|v| list_of(&v))
            .map_err(err)
    }
}

/// `log c(z) = -‖A z - y‖² / (2σ²)` with a dense `A`.
#[pyclass(name = "LinearGaussianGuidance", frozen)]
struct PyGuidance(CoreLinearGuidance);

#[pymethods]
impl PyGuidance {
    #[new]
    fn new(a: Vec<Vec<f64>>, y: Vec<f64>, sigma_y: f64) -> PyResult<Self> {
        let a = matrix_of(a)?;
        CoreLinearGuidance::new(LinearOperator::dense(&a), vec_of(y), sigma_y)
            .map(Self)
            .map_err(err)
    }

    fn log_c(&self, z: Vec<f64>) -> PyResult<f64> {
        self.0.log_c(&vec_of(z)).map_err(err)
    }

    fn grad_log_c(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.grad_log_c(&vec_of(z)).map(|g| list_of(&g)).map_err(err)
    }

    fn smoothness(&self) -> Option<f64> {
        self.0.smoothness_bound()
    }
}

#[pyclass(name = "RunResult", frozen)]
struct PyRunResult(RunReport);

#[pymethods]
impl PyRunResult {
    #[getter]
    fn sampler(&self) -> &'static str {
        self.0.sampler.name()
    }

    #[getter]
    fn failed_chains(&self) -> usize {
        self.0.failed_chains
    }

    /// Final x₀ of every successful chain.
    fn samples(&self) -> Vec<Vec<f64>> {
        self.0.final_x().iter().map(list_of).collect()
    }

    fn final_z(&self) -> Vec<Vec<f64>> {
        self.0.final_z().iter().map(list_of).collect()
    }

    /// Per-step chain means, ordered from t = T down to 1.
    fn step_summary<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.0
            .step_summary
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("t", s.t)?;
                d.set_item("primal_res", s.primal_res)?;
                d.set_item("dual_res", s.dual_res)?;
                d.set_item("movement", s.movement)?;
                d.set_item("aug_lagrangian", s.aug_lagrangian)?;
                Ok(d)
            })
            .collect()
    }

    fn write(&self, dir: std::path::PathBuf) -> PyResult<()> {
        self.0.write_dir(&dir).map_err(err)
    }
}

#[allow(clippy::too_many_arguments)]
fn config(
    rho: f64,
    eta: f64,
    inner_iters: usize,
    noise: bool,
    live_score: bool,
    chains: usize,
    trace_chains: usize,
    seed: u64,
) -> SamplerConfig {
    SamplerConfig {
        rho,
        eta,
        inner_iters: InnerIters::Constant(inner_iters),
        noise_in_x_update: noise,
        score_mode: if live_score {
            ScoreModeKind::Live
        } else {
            ScoreModeKind::Frozen
        },
        chains,
        trace_chains,
        seed,
        ..Default::default()
    }
}

#[pyfunction]
#[pyo3(signature = (schedule, prior, guidance = None, *, rho = 1.0, eta = 1.0, inner_iters = 5, noise = false,
                    live_score = false, chains = 1, trace_chains = 1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn run_admm(
    py: Python<'_>,
    schedule: &PySchedule,
    prior: &PyPrior,
    guidance: Option<&PyGuidance>,
    rho: f64,
    eta: f64,
    inner_iters: usize,
    noise: bool,
    live_score: bool,
    chains: usize,
    trace_chains: usize,
    seed: u64,
) -> PyResult<PyRunResult> {
    let cfg = config(rho, eta, inner_iters, noise, live_score, chains, trace_chains, seed);
    let null = NullGuidance::new(prior.0.dim());
    let g: &(dyn GuidanceModel + Sync) = match guidance {
        Some(g) => &g.0,
        None => &null,
    };
    py.detach(|| sampler::run_admm(&schedule.0, &prior.0, g, &cfg))
        .map(PyRunResult)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (schedule, prior, *, noise = true, chains = 1, seed = 0))]
fn run_unconditional(
    py: Python<'_>,
    schedule: &PySchedule,
    prior: &PyPrior,
    noise: bool,
    chains: usize,
    seed: u64,
) -> PyResult<PyRunResult> {
    let cfg = config(1.0, 1.0, 0, noise, false, chains, 0, seed);
    py.detach(|| sampler::run_unconditional(&schedule.0, &prior.0, &cfg))
        .map(PyRunResult)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (schedule, prior, guidance, zeta, *, noise = true, chains = 1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn run_dps(
    py: Python<'_>,
    schedule: &PySchedule,
    prior: &PyPrior,
    guidance: &PyGuidance,
    zeta: f64,
    noise: bool,
    chains: usize,
    seed: u64,
) -> PyResult<PyRunResult> {
    let cfg = config(1.0, 1.0, 0, noise, false, chains, 0, seed);
    py.detach(|| sampler::run_dps(&schedule.0, &prior.0, &guidance.0, zeta, &cfg))
        .map(PyRunResult)
        .map_err(err)
}

/// Runs a shipped task preset with its default ADMM settings.
#[pyfunction]
#[pyo3(signature = (name, *, steps = None, chains = None, seed = 0))]
fn run_preset(
    py: Python<'_>,
    name: &str,
    steps: Option<usize>,
    chains: Option<usize>,
    seed: u64,
) -> PyResult<PyRunResult> {
    let spec = tasks::preset(name).map_err(err)?;
    let task = Task::build(&spec, None).map_err(err)?;
    let defaults = spec
        .defaults
        .clone()
        .ok_or_else(|| PyValueError::new_err("preset has no defaults"))?;
    let sched_spec = match steps {
        Some(s) => defaults.schedule.with_steps(s).map_err(err)?,
        None => defaults.schedule.clone(),
    };
    let sched = sched_spec.build().map_err(err)?;
    let mut cfg = defaults.admm;
    cfg.seed = seed;
    if let Some(c) = chains {
        cfg.chains = c;
    }
    py.detach(|| sampler::run_admm(&sched, &task.prior, task.guidance.as_model(), &cfg))
        .map(PyRunResult)
        .map_err(err)
}

fn oracle_dict<'py>(py: Python<'py>, o: &OracleResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("method", &o.method)?;
    d.set_item("mean", o.mean.clone())?;
    d.set_item("cov", o.cov.clone())?;
    d.set_item("ess", o.ess)?;
    d.set_item("mean_se", o.mean_se.clone())?;
    d.set_item("reliable", o.reliable)?;
    Ok(d)
}

#[pyfunction]
fn exact_gaussian_posterior<'py>(
    py: Python<'py>,
    prior_mean: Vec<f64>,
    prior_var: f64,
    a: Vec<Vec<f64>>,
    y: Vec<f64>,
    sigma_y: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let o = tasks::exact_gaussian_posterior(&vec_of(prior_mean), prior_var, &matrix_of(a)?, &vec_of(y), sigma_y)
        .map_err(err)?;
    oracle_dict(py, &o)
}

#[pyfunction]
#[pyo3(signature = (prior, guidance, n = 20000, seed = 0))]
fn importance_posterior<'py>(
    py: Python<'py>,
    prior: &PyPrior,
    guidance: &PyGuidance,
    n: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let o = tasks::importance_posterior(&prior.0, &guidance.0, n, seed).map_err(err)?;
    oracle_dict(py, &o)
}

#[pyfunction]
fn prox_quadratic(mean: Vec<f64>, variance: f64, v: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    prox::prox_quadratic(&vec_of(mean), variance, &vec_of(v), lam)
        .map(|p| list_of(&p))
        .map_err(err)
}

/// Numerical `prox_{λ f}(v)` for `f = -log p_ᾱ` of a prior.
#[pyfunction]
#[pyo3(signature = (prior, abar, v, lam, tol = 1e-10))]
fn prox_neg_log_density(prior: &PyPrior, abar: f64, v: Vec<f64>, lam: f64, tol: f64) -> PyResult<Vec<f64>> {
    let f = prox::NegLogDensity { model: &prior.0, abar };
    prox::prox_numeric(&f, &vec_of(v), lam, tol)
        .map(|p| list_of(&p))
        .map_err(err)
}

/// Deterministic reverse step at `t` (1-based).
#[pyfunction]
fn diffusion_prox_step(schedule: &PySchedule, prior: &PyPrior, v: Vec<f64>, t: usize) -> PyResult<Vec<f64>> {
    prox::diffusion_prox_step(&schedule.0, &prior.0, &vec_of(v), t, None)
        .map(|p| list_of(&p))
        .map_err(err)
}

#[pyfunction]
fn wasserstein2_gaussian(m1: Vec<f64>, c1: Vec<Vec<f64>>, m2: Vec<f64>, c2: Vec<Vec<f64>>) -> PyResult<f64> {
    tasks::wasserstein2_gaussian(&vec_of(m1), &matrix_of(c1)?, &vec_of(m2), &matrix_of(c2)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (x, reference, peak = 1.0))]
fn psnr(x: Vec<f64>, reference: Vec<f64>, peak: f64) -> PyResult<f64> {
    tasks::psnr(&vec_of(x), &vec_of(reference), peak).map_err(err)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    tasks::preset_names()
}

/// Exact (or importance) posterior of a preset task.
#[pyfunction]
fn preset_oracle<'py>(py: Python<'py>, name: &str) -> PyResult<Option<Bound<'py, PyDict>>> {
    let task = Task::build(&tasks::preset(name).map_err(err)?, None).map_err(err)?;
    match py.detach(|| task.oracle()).map_err(err)? {
        Some(o) => oracle_dict(py, &o).map(Some),
        None => Ok(None),
    }
}

#[pymodule]
#[pyo3(name = "guided_admm")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyPrior>()?;
    m.add_class::<PyGuidance>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run_admm, m)?)?;
    m.add_function(wrap_pyfunction!(run_unconditional, m)?)?;
    m.add_function(wrap_pyfunction!(run_dps, m)?)?;
    m.add_function(wrap_pyfunction!(run_preset, m)?)?;
    m.add_function(wrap_pyfunction!(exact_gaussian_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(importance_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(prox_quadratic, m)?)?;
    m.add_function(wrap_pyfunction!(prox_neg_log_density, m)?)?;
    m.add_function(wrap_pyfunction!(diffusion_prox_step, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein2_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(preset_oracle, m)?)?;
    Ok(())
}
