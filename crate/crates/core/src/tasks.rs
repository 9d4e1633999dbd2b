//! Benchmark tasks, ground-truth posterior oracles and reconstruction metrics.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::guidance::{
    Guidance, GuidanceModel, GuidanceSpec, LinearGaussianGuidance, NullGuidance, TanhFeatureGuidance, Waypoint,
    WaypointGuidance,
};
use crate::numeric::{logsumexp, mean_and_cov, sqrtm_psd, symmetrize, Matrix, Rng, Vector, MAX_DIM};
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleSpec;
use crate::scores::{Prior, PriorSpec, ScoreModel};

pub const MIN_RELIABLE_ESS: f64 = 50.0;
const IMPORTANCE_BATCH: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ConjugateExact,
    ImportanceSampling,
    None,
}

fn default_peak() -> f64 {
    1.0
}
fn default_oracle_samples() -> usize {
    20_000
}

/// Suggested sampler settings shipped with a preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDefaults {
    pub version: u32,
    pub schedule: ScheduleSpec,
    pub admm: SamplerConfig,
    pub dps_zeta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub dim: usize,
    pub prior: PriorSpec,
    pub guidance: GuidanceSpec,
    /// Seeds the ground truth draw (stream 0) and measurement noise (stream 1).
    pub truth_seed: u64,
    #[serde(default = "default_peak")]
    pub peak: f64,
    pub oracle: OracleKind,
    #[serde(default = "default_oracle_samples")]
    pub oracle_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defaults: Option<TaskDefaults>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(Error::Config(format!("task dim {} outside 1..={MAX_DIM}", self.dim)));
        }
        if !(self.peak > 0.0) {
            return Err(Error::Config("peak must be positive".into()));
        }
        if self.oracle == OracleKind::ConjugateExact {
            let gaussian = matches!(self.prior, PriorSpec::Gaussian { .. });
            let linear = matches!(
                self.guidance,
                GuidanceSpec::LinearGaussian { .. } | GuidanceSpec::Waypoint { .. } | GuidanceSpec::Null
            );
            if !(gaussian && linear) {
                return Err(Error::Config(
                    "conjugate_exact oracle needs a gaussian prior and linear-Gaussian guidance".into(),
                ));
            }
        }
        if self.oracle == OracleKind::ImportanceSampling && self.oracle_samples == 0 {
            return Err(Error::Config("oracle_samples must be positive".into()));
        }
        Ok(())
    }
}

const PRESETS: [(&str, &str); 4] = [
    ("inpaint-8", include_str!("../presets/inpaint-8.json")),
    ("sr-16to4", include_str!("../presets/sr-16to4.json")),
    ("deblur-16", include_str!("../presets/deblur-16.json")),
    ("trajectory-32", include_str!("../presets/trajectory-32.json")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

pub fn preset(name: &str) -> Result<TaskSpec> {
    let (_, text) = PRESETS.iter().find(|p| p.0 == name).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset `{name}` (known: {})",
            preset_names().join(", ")
        ))
    })?;
    let spec: TaskSpec = serde_json::from_str(text)?;
    spec.validate()?;
    Ok(spec)
}

/// A task with its prior, guidance, ground truth and measurement resolved.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    pub prior: Prior,
    pub guidance: Guidance,
    pub truth: Vector,
}

impl Task {
    pub fn build(spec: &TaskSpec, base_dir: Option<&Path>) -> Result<Self> {
        spec.validate()?;
        let prior = Prior::from_spec(&spec.prior, spec.dim, base_dir)?;
        let truth = prior.sample(&mut Rng::new(spec.truth_seed, 0));
        let mut noise = Rng::new(spec.truth_seed, 1);
        let dim = spec.dim;
        let guidance = match &spec.guidance {
            GuidanceSpec::LinearGaussian {
                operator,
                sigma_y,
                y,
                y_csv,
            } => {
                operator.validate()?;
                check_dim("operator input", dim, operator.in_dim())?;
                let y = match (y, y_csv) {
                    (Some(y), None) => Vector::from_vec(y.clone()),
                    (None, Some(path)) => read_vector_csv(&resolve(base_dir, path))?,
                    (None, None) => operator.apply(&truth)? + noise.gaussian_vec(operator.out_dim()) * *sigma_y,
                    _ => return Err(Error::Config("give at most one of `y` and `y_csv`".into())),
                };
                Guidance::LinearGaussian(LinearGaussianGuidance::new(operator.clone(), y, *sigma_y)?)
            }
            GuidanceSpec::TanhFeature { operator, sigma_y, y } => {
                operator.validate()?;
                check_dim("operator input", dim, operator.in_dim())?;
                let y = match y {
                    Some(y) => Vector::from_vec(y.clone()),
                    None => operator.apply(&truth.map(f64::tanh))? + noise.gaussian_vec(operator.out_dim()) * *sigma_y,
                };
                Guidance::TanhFeature(TanhFeatureGuidance::new(LinearGaussianGuidance::new(
                    operator.clone(),
                    y,
                    *sigma_y,
                )?))
            }
            GuidanceSpec::Waypoint {
                block,
                coords,
                indices,
                weight,
                targets,
            } => {
                let sigma = (0.5 / weight).sqrt();
                let waypoints = match targets {
                    Some(t) => {
                        if t.len() != indices.len() {
                            return Err(Error::Config("one target per waypoint index required".into()));
                        }
                        indices
                            .iter()
                            .zip(t)
                            .map(|(&index, target)| Waypoint {
                                index,
                                target: target.clone(),
                            })
                            .collect()
                    }
                    None => indices
                        .iter()
                        .map(|&index| Waypoint {
                            index,
                            target: coords
                                .iter()
                                .map(|&c| {
                                    let at = index * block + c;
                                    truth.get(at).copied().unwrap_or(0.0) + sigma * noise.gaussian()
                                })
                                .collect(),
                        })
                        .collect(),
                };
                Guidance::Waypoint(WaypointGuidance::new(dim, *block, coords.clone(), waypoints, *weight)?)
            }
            GuidanceSpec::Null => Guidance::Null(NullGuidance::new(dim)),
        };
        Ok(Self {
            spec: spec.clone(),
            prior,
            guidance,
            truth,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Hash of the canonical JSON of the spec, the resolved measurement and the truth.
    pub fn content_hash(&self) -> String {
        #[derive(Serialize)]
        struct Content<'a> {
            spec: &'a TaskSpec,
            truth: &'a [f64],
            measurement: Vec<f64>,
        }
        let measurement = match &self.guidance {
            Guidance::LinearGaussian(g) => g.y().as_slice().to_vec(),
            Guidance::TanhFeature(g) => g.inner().y().as_slice().to_vec(),
            Guidance::Waypoint(w) => w.waypoints().iter().flat_map(|p| p.target.clone()).collect(),
            Guidance::Null(_) => Vec::new(),
        };
        let content = Content {
            spec: &self.spec,
            truth: self.truth.as_slice(),
            measurement,
        };
        let bytes = serde_json::to_vec(&content).expect("task content serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn oracle(&self) -> Result<Option<OracleResult>> {
        match self.spec.oracle {
            OracleKind::None => Ok(None),
            OracleKind::ConjugateExact => {
                let Prior::Gaussian(p) = &self.prior else {
                    return Err(Error::Config("conjugate oracle needs a gaussian prior".into()));
                };
                let (a, y, sigma) = match &self.guidance {
                    Guidance::Null(_) => (Matrix::zeros(1, self.dim()), Vector::zeros(1), 1.0),
                    g => {
                        let lg = g
                            .linear_gaussian()
                            .ok_or_else(|| Error::Config("conjugate oracle needs linear guidance".into()))?;
                        (lg.operator().to_dense(), lg.y().clone(), lg.sigma_y())
                    }
                };
                exact_gaussian_posterior(p.mean(), p.variance(), &a, &y, sigma).map(Some)
            }
            OracleKind::ImportanceSampling => importance_posterior(
                &self.prior,
                &self.guidance,
                self.spec.oracle_samples,
                self.spec.truth_seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
            )
            .map(Some),
        }
    }

    /// Loads `oracle-<hash>.json` from `dir` when present and matching,
    /// otherwise computes and stores it.
    pub fn oracle_cached(&self, dir: &Path) -> Result<Option<CachedOracle>> {
        if self.spec.oracle == OracleKind::None {
            return Ok(None);
        }
        let hash = self.content_hash();
        let path = dir.join(format!("oracle-{hash}.json"));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(cached) = serde_json::from_str::<CachedOracle>(&text) {
                if cached.hash == hash {
                    return Ok(Some(cached));
                }
            }
        }
        let result = self.oracle()?.expect("oracle kind is not none");
        let cached = CachedOracle { hash, result };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&path, serde_json::to_string_pretty(&cached)?).map_err(|e| Error::io(&path, e))?;
        Ok(Some(cached))
    }
}

fn resolve(base: Option<&Path>, path: &str) -> std::path::PathBuf {
    match base {
        Some(b) => b.join(path),
        None => path.into(),
    }
}

fn read_vector_csv(path: &Path) -> Result<Vector> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        for field in rec?.iter() {
            out.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: bad number `{field}`: {e}", path.display())))?,
            );
        }
    }
    Ok(Vector::from_vec(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedOracle {
    pub hash: String,
    pub result: OracleResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub method: String,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ess: Option<f64>,
    /// Monte-Carlo standard error of each mean coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_se: Option<Vec<f64>>,
    pub reliable: bool,
}

impl OracleResult {
    fn from_moments(method: &str, mean: &Vector, cov: &Matrix) -> Self {
        Self {
            method: method.into(),
            mean: mean.as_slice().to_vec(),
            cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
            ess: None,
            mean_se: None,
            reliable: true,
        }
    }

    pub fn mean_vec(&self) -> Vector {
        Vector::from_vec(self.mean.clone())
    }

    pub fn cov_mat(&self) -> Matrix {
        let d = self.mean.len();
        Matrix::from_fn(d, d, |i, j| self.cov[i][j])
    }
}

/// Conjugate posterior of `N(mean, var·I)` under `y = A x + N(0, σ²I)`.
pub fn exact_gaussian_posterior(
    prior_mean: &Vector,
    prior_var: f64,
    a: &Matrix,
    y: &Vector,
    sigma_y: f64,
) -> Result<OracleResult> {
    let d = prior_mean.len();
    check_dim("posterior operator columns", d, a.ncols())?;
    check_dim("posterior measurement", a.nrows(), y.len())?;
    if !(prior_var > 0.0 && sigma_y > 0.0) {
        return Err(Error::InvalidArgument("prior_var and sigma_y must be positive".into()));
    }
    let s2 = sigma_y * sigma_y;
    let precision = Matrix::identity(d, d) / prior_var + a.transpose() * a / s2;
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("posterior precision is singular".into()))?;
    let cov = symmetrize(&chol.inverse());
    let rhs = prior_mean / prior_var + a.transpose() * y / s2;
    let mean = chol.solve(&rhs);
    Ok(OracleResult::from_moments("conjugate_exact", &mean, &cov))
}

/// Self-normalized importance sampling from the prior with weights ∝ c.
/// Batches of 1000 draws use RNG substreams `(seed, batch)`.
pub fn importance_posterior(
    prior: &dyn ScoreModel,
    guidance: &dyn GuidanceModel,
    n: usize,
    seed: u64,
) -> Result<OracleResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("importance sampling needs n > 0".into()));
    }
    check_dim("importance guidance", prior.dim(), guidance.dim())?;
    let batches = n.div_ceil(IMPORTANCE_BATCH);
    let parts: Vec<Result<Vec<(Vector, f64)>>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = Rng::substream(seed, b as u64);
            let count = IMPORTANCE_BATCH.min(n - b * IMPORTANCE_BATCH);
            (0..count)
                .map(|_| {
                    let x = prior.sample(&mut rng);
                    let lw = guidance.log_c(&x)?;
                    Ok((x, lw))
                })
                .collect()
        })
        .collect();
    let mut draws = Vec::with_capacity(n);
    for p in parts {
        draws.extend(p?);
    }
    let logw: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let norm = logsumexp(&logw);
    if !norm.is_finite() {
        return Err(Error::InvalidArgument("all importance weights vanish".into()));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - norm).exp()).collect();
    let dim = prior.dim();
    let mut mean = Vector::zeros(dim);
    for ((x, _), wi) in draws.iter().zip(&w) {
        mean += x * *wi;
    }
    let mut cov = Matrix::zeros(dim, dim);
    let mut var_of_mean = Vector::zeros(dim);
    for ((x, _), wi) in draws.iter().zip(&w) {
        let dx = x - &mean;
        cov += &dx * dx.transpose() * *wi;
        var_of_mean += dx.map(|v| v * v) * (wi * wi);
    }
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let mut out = OracleResult::from_moments("importance_sampling", &mean, &symmetrize(&cov));
    out.ess = Some(ess);
    out.mean_se = Some(var_of_mean.iter().map(|v| v.sqrt()).collect());
    out.reliable = ess >= MIN_RELIABLE_ESS;
    Ok(out)
}

pub fn mse(x: &Vector, reference: &Vector) -> Result<f64> {
    check_dim("mse", reference.len(), x.len())?;
    Ok((x - reference).norm_squared() / x.len() as f64)
}

/// `10 log10(peak² / MSE)`, `+∞` when the inputs coincide.
pub fn psnr(x: &Vector, reference: &Vector, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument("peak must be positive".into()));
    }
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// 2-Wasserstein distance between two Gaussians.
pub fn wasserstein2_gaussian(m1: &Vector, c1: &Matrix, m2: &Vector, c2: &Matrix) -> Result<f64> {
    check_dim("w2 means", m1.len(), m2.len())?;
    check_dim("w2 cov1", m1.len(), c1.nrows())?;
    check_dim("w2 cov2", m1.len(), c2.nrows())?;
    let tol = 1e-9;
    let r2 = sqrtm_psd(c2, tol)?;
    sqrtm_psd(c1, tol)?;
    let cross = sqrtm_psd(&symmetrize(&(&r2 * c1 * &r2)), tol)?;
    let w2 = (m1 - m2).norm_squared() + (c1 + c2 - cross * 2.0).trace();
    Ok(w2.max(0.0).sqrt())
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(samples: &[Vector]) -> Result<(Vector, Matrix)> {
    mean_and_cov(samples)
}
