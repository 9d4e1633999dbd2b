//! Analytic score models.
//!
//! Every model here knows its exact noised marginal
//! `p_ᾱ(x) = ∫ N(x; √ᾱ x0, (1-ᾱ) I) p(x0) dx0`, so scores, log-densities and
//! Tweedie denoising are oracles rather than learned approximations.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{logsumexp, Matrix, Rng, Vector, MAX_DIM};

/// Variance used for the empirical model's clean (ᾱ = 1) marginal, which is
/// otherwise a sum of point masses.
pub const EMPIRICAL_VARIANCE_FLOOR: f64 = 1e-10;

pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// ∇ log p_ᾱ(x).
    fn score(&self, x: &Vector, abar: f64) -> Result<Vector>;

    /// log p_ᾱ(x), including the normalizing constant.
    fn log_density(&self, x: &Vector, abar: f64) -> Result<f64>;

    fn log_density0(&self, x: &Vector) -> Result<f64> {
        self.log_density(x, 1.0)
    }

    /// Lipschitz constant of ∇(-log p) at ᾱ = 1, when known in closed form.
    fn smoothness_bound(&self) -> Option<f64>;

    /// Exact draw from the clean distribution.
    fn sample(&self, rng: &mut Rng) -> Vector;
}

fn check_abar(abar: f64) -> Result<()> {
    if abar > 0.0 && abar <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("abar {abar} outside (0, 1]")))
    }
}

fn gaussian_log_density(x: &Vector, mean: &Vector, var: f64) -> f64 {
    let d = x.len() as f64;
    -(x - mean).norm_squared() / (2.0 * var) - 0.5 * d * (2.0 * PI * var).ln()
}

/// Isotropic Gaussian prior N(mean, variance·I).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScoreModel {
    mean: Vector,
    variance: f64,
}

impl GaussianScoreModel {
    pub fn new(mean: Vector, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!("variance {variance} must be positive")));
        }
        if mean.is_empty() || mean.len() > MAX_DIM {
            return Err(Error::InvalidArgument(format!("dimension {} out of range", mean.len())));
        }
        Ok(Self { mean, variance })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(Vector::zeros(dim), 1.0)
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Mean and variance of the noised marginal.
    pub fn noised(&self, abar: f64) -> (Vector, f64) {
        (&self.mean * abar.sqrt(), abar * self.variance + 1.0 - abar)
    }

    /// E[x0 | x_ᾱ] computed from the joint Gaussian directly.
    pub fn posterior_mean(&self, x: &Vector, abar: f64) -> Vector {
        let v = self.variance;
        let gain = abar.sqrt() * v / (abar * v + 1.0 - abar);
        &self.mean + (x - &self.mean * abar.sqrt()) * gain
    }
}

impl ScoreModel for GaussianScoreModel {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, x: &Vector, abar: f64) -> Result<Vector> {
        check_abar(abar)?;
        check_dim("score", self.dim(), x.len())?;
        let (m, v) = self.noised(abar);
        Ok(-(x - m) / v)
    }

    fn log_density(&self, x: &Vector, abar: f64) -> Result<f64> {
        check_abar(abar)?;
        check_dim("log_density", self.dim(), x.len())?;
        let (m, v) = self.noised(abar);
        Ok(gaussian_log_density(x, &m, v))
    }

    fn smoothness_bound(&self) -> Option<f64> {
        Some(1.0 / self.variance)
    }

    fn sample(&self, rng: &mut Rng) -> Vector {
        &self.mean + rng.gaussian_vec(self.dim()) * self.variance.sqrt()
    }
}

/// Mixture of isotropic Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureScoreModel {
    weights: Vec<f64>,
    means: Vec<Vector>,
    variances: Vec<f64>,
}

impl MixtureScoreModel {
    pub fn new(weights: Vec<f64>, means: Vec<Vector>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::InvalidArgument(
                "mixture needs matching non-empty weights, means and variances".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("mixture weights must lie on the simplex".into()));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("mixture variances must be positive".into()));
        }
        let dim = means[0].len();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!("dimension {dim} out of range")));
        }
        for m in &means {
            check_dim("mixture mean", dim, m.len())?;
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Component log-joint terms `log w_k + log N(x; √ᾱ m_k, v_k' I)`.
    fn component_logs(&self, x: &Vector, abar: f64) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| {
                let vn = abar * v + 1.0 - abar;
                w.ln() + gaussian_log_density(x, &(m * abar.sqrt()), vn)
            })
            .collect()
    }

    /// Posterior responsibilities of each component given x at noise level ᾱ.
    pub fn responsibilities(&self, x: &Vector, abar: f64) -> Vec<f64> {
        let logs = self.component_logs(x, abar);
        let norm = logsumexp(&logs);
        logs.iter().map(|l| (l - norm).exp()).collect()
    }

    /// Hessian of `-log p_ᾱ` at x: `Σ r_k I / v_k' - Cov_r(g_k)` with
    /// `g_k = -(x - √ᾱ m_k) / v_k'`.
    pub fn neg_log_hessian(&self, x: &Vector, abar: f64) -> Matrix {
        let d = x.len();
        let r = self.responsibilities(x, abar);
        let mut diag = 0.0;
        let mut mean_g = Vector::zeros(d);
        let mut second = Matrix::zeros(d, d);
        for ((rk, m), v) in r.iter().zip(&self.means).zip(&self.variances) {
            let vn = abar * v + 1.0 - abar;
            let g = -(x - m * abar.sqrt()) / vn;
            diag += rk / vn;
            mean_g += &g * *rk;
            second += &g * g.transpose() * *rk;
        }
        Matrix::identity(d, d) * diag - (second - &mean_g * mean_g.transpose())
    }
}

impl ScoreModel for MixtureScoreModel {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn score(&self, x: &Vector, abar: f64) -> Result<Vector> {
        check_abar(abar)?;
        check_dim("score", self.dim(), x.len())?;
        let r = self.responsibilities(x, abar);
        let mut s = Vector::zeros(x.len());
        for ((rk, m), v) in r.iter().zip(&self.means).zip(&self.variances) {
            let vn = abar * v + 1.0 - abar;
            s -= (x - m * abar.sqrt()) * (rk / vn);
        }
        Ok(s)
    }

    fn log_density(&self, x: &Vector, abar: f64) -> Result<f64> {
        check_abar(abar)?;
        check_dim("log_density", self.dim(), x.len())?;
        Ok(logsumexp(&self.component_logs(x, abar)))
    }

    fn smoothness_bound(&self) -> Option<f64> {
        if self.means.len() == 1 {
            Some(1.0 / self.variances[0])
        } else {
            None
        }
    }

    fn sample(&self, rng: &mut Rng) -> Vector {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        &self.means[k] + rng.gaussian_vec(self.dim()) * self.variances[k].sqrt()
    }
}

/// Uniform distribution over a finite dataset: the marginal that a perfectly
/// trained denoiser on that dataset would learn.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalScoreModel {
    points: Vec<Vector>,
}

impl EmpiricalScoreModel {
    pub fn new(points: Vec<Vector>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidArgument("empirical model needs at least one point".into()))?;
        let dim = first.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!("dimension {dim} out of range")));
        }
        for p in &points {
            check_dim("empirical point", dim, p.len())?;
        }
        Ok(Self { points })
    }

    /// Reads one row vector per CSV record; no header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut points = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row: Result<Vec<f64>> = record
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Config(format!("{}: bad number {f:?}: {e}", path.display())))
                })
                .collect();
            points.push(Vector::from_vec(row?));
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[Vector] {
        &self.points
    }

    fn kernel_var(abar: f64) -> f64 {
        (1.0 - abar).max(EMPIRICAL_VARIANCE_FLOOR)
    }

    /// Softmax weights `w_i ∝ exp(-‖x - √ᾱ x_i‖² / (2(1-ᾱ)))`.
    pub fn weights(&self, x: &Vector, abar: f64) -> Vec<f64> {
        let var = Self::kernel_var(abar);
        let logs: Vec<f64> = self
            .points
            .iter()
            .map(|p| -(x - p * abar.sqrt()).norm_squared() / (2.0 * var))
            .collect();
        let norm = logsumexp(&logs);
        logs.iter().map(|l| (l - norm).exp()).collect()
    }
}

impl ScoreModel for EmpiricalScoreModel {
    fn dim(&self) -> usize {
        self.points[0].len()
    }

    fn score(&self, x: &Vector, abar: f64) -> Result<Vector> {
        check_abar(abar)?;
        check_dim("score", self.dim(), x.len())?;
        let var = Self::kernel_var(abar);
        let w = self.weights(x, abar);
        let mut s = Vector::zeros(x.len());
        for (wi, p) in w.iter().zip(&self.points) {
            s -= (x - p * abar.sqrt()) * (wi / var);
        }
        Ok(s)
    }

    fn log_density(&self, x: &Vector, abar: f64) -> Result<f64> {
        check_abar(abar)?;
        check_dim("log_density", self.dim(), x.len())?;
        let var = Self::kernel_var(abar);
        let logs: Vec<f64> = self
            .points
            .iter()
            .map(|p| gaussian_log_density(x, &(p * abar.sqrt()), var))
            .collect();
        Ok(logsumexp(&logs) - (self.points.len() as f64).ln())
    }

    fn smoothness_bound(&self) -> Option<f64> {
        None
    }

    fn sample(&self, rng: &mut Rng) -> Vector {
        let n = self.points.len();
        let i = ((rng.uniform() * n as f64) as usize).min(n - 1);
        self.points[i].clone()
    }
}

/// Tweedie estimate `(z + (1-ᾱ) s(z, ᾱ)) / √ᾱ` of the clean sample.
pub fn tweedie_denoise(model: &dyn ScoreModel, z: &Vector, abar: f64) -> Result<Vector> {
    check_abar(abar)?;
    if abar == 1.0 {
        check_dim("tweedie_denoise", model.dim(), z.len())?;
        return Ok(z.clone());
    }
    let s = model.score(z, abar)?;
    Ok(tweedie_with_score(z, &s, abar))
}

/// Tweedie estimate with a caller-supplied score.
pub fn tweedie_with_score(z: &Vector, score: &Vector, abar: f64) -> Vector {
    (z + score * (1.0 - abar)) / abar.sqrt()
}

/// Serialized prior description used by task and experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// `mean` may be omitted (zero mean).
    Gaussian {
        #[serde(default)]
        mean: Option<Vec<f64>>,
        variance: f64,
    },
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
    Empirical {
        #[serde(default)]
        points: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        csv: Option<String>,
    },
}

/// Closed set of shipped priors; dispatches to the concrete model.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    Gaussian(GaussianScoreModel),
    Mixture(MixtureScoreModel),
    Empirical(EmpiricalScoreModel),
}

impl Prior {
    pub fn from_spec(spec: &PriorSpec, dim: usize, base_dir: Option<&Path>) -> Result<Self> {
        let prior = match spec {
            PriorSpec::Gaussian { mean, variance } => {
                let mean = match mean {
                    Some(m) => Vector::from_vec(m.clone()),
                    None => Vector::zeros(dim),
                };
                Prior::Gaussian(GaussianScoreModel::new(mean, *variance)?)
            }
            PriorSpec::Mixture {
                weights,
                means,
                variances,
            } => Prior::Mixture(MixtureScoreModel::new(
                weights.clone(),
                means.iter().map(|m| Vector::from_vec(m.clone())).collect(),
                variances.clone(),
            )?),
            PriorSpec::Empirical { points, csv } => match (points, csv) {
                (Some(p), None) => Prior::Empirical(EmpiricalScoreModel::new(
                    p.iter().map(|r| Vector::from_vec(r.clone())).collect(),
                )?),
                (None, Some(path)) => {
                    let path = match base_dir {
                        Some(dir) => dir.join(path),
                        None => path.into(),
                    };
                    Prior::Empirical(EmpiricalScoreModel::from_csv(&path)?)
                }
                _ => {
                    return Err(Error::Config(
                        "empirical prior needs exactly one of `points` or `csv`".into(),
                    ))
                }
            },
        };
        check_dim("prior", dim, prior.dim())?;
        Ok(prior)
    }

    pub fn as_model(&self) -> &dyn ScoreModel {
        match self {
            Prior::Gaussian(m) => m,
            Prior::Mixture(m) => m,
            Prior::Empirical(m) => m,
        }
    }
}

impl ScoreModel for Prior {
    fn dim(&self) -> usize {
        self.as_model().dim()
    }
    fn score(&self, x: &Vector, abar: f64) -> Result<Vector> {
        self.as_model().score(x, abar)
    }
    fn log_density(&self, x: &Vector, abar: f64) -> Result<f64> {
        self.as_model().log_density(x, abar)
    }
    fn smoothness_bound(&self) -> Option<f64> {
        self.as_model().smoothness_bound()
    }
    fn sample(&self, rng: &mut Rng) -> Vector {
        self.as_model().sample(rng)
    }
}
