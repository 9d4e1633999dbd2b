//! Condition likelihoods `log c(z0, y)` and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{spectral_norm_sq, Matrix, Vector};

pub trait GuidanceModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Log-likelihood of the condition, up to a model-fixed constant.
    fn log_c(&self, z0: &Vector) -> Result<f64>;

    fn grad_log_c(&self, z0: &Vector) -> Result<Vector>;

    /// Lipschitz constant of ∇ log c, when known.
    fn smoothness_bound(&self) -> Option<f64>;

    /// True when the gradient is identically zero.
    fn is_null(&self) -> bool {
        false
    }
}

/// Measurement operators at desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LinearOperator {
    /// Row-major dense matrix.
    Dense { rows: Vec<Vec<f64>> },
    /// Keeps the listed coordinates (inpainting).
    Mask { dim: usize, indices: Vec<usize> },
    /// Averages consecutive blocks of `factor` coordinates (super-resolution).
    Decimate { dim: usize, factor: usize },
    /// Centered circular convolution with an odd-width kernel (deblurring).
    CircularConv { dim: usize, kernel: Vec<f64> },
}

impl LinearOperator {
    pub fn dense(m: &Matrix) -> Self {
        LinearOperator::Dense {
            rows: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LinearOperator::Dense { rows } => {
                let cols = rows.first().map(Vec::len).unwrap_or(0);
                if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
                    return Err(Error::InvalidArgument(
                        "dense operator must be a non-empty rectangle".into(),
                    ));
                }
            }
            LinearOperator::Mask { dim, indices } => {
                if indices.is_empty() || indices.iter().any(|i| i >= dim) {
                    return Err(Error::InvalidArgument(format!("mask indices must lie in 0..{dim}")));
                }
            }
            LinearOperator::Decimate { dim, factor } => {
                if *factor == 0 || dim % factor != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "decimation factor {factor} must divide dimension {dim}"
                    )));
                }
            }
            LinearOperator::CircularConv { dim, kernel } => {
                if kernel.len() % 2 == 0 || kernel.len() > *dim {
                    return Err(Error::InvalidArgument(
                        "convolution kernel must have odd width no larger than the signal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        match self {
            LinearOperator::Dense { rows } => rows.first().map(Vec::len).unwrap_or(0),
            LinearOperator::Mask { dim, .. }
            | LinearOperator::Decimate { dim, .. }
            | LinearOperator::CircularConv { dim, .. } => *dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LinearOperator::Dense { rows } => rows.len(),
            LinearOperator::Mask { indices, .. } => indices.len(),
            LinearOperator::Decimate { dim, factor } => dim / factor,
            LinearOperator::CircularConv { dim, .. } => *dim,
        }
    }

    pub fn apply(&self, u: &Vector) -> Result<Vector> {
        check_dim("operator input", self.in_dim(), u.len())?;
        Ok(match self {
            LinearOperator::Dense { rows } => Vector::from_iterator(
                rows.len(),
                rows.iter().map(|r| r.iter().zip(u.iter()).map(|(a, b)| a * b).sum()),
            ),
            LinearOperator::Mask { indices, .. } => Vector::from_iterator(indices.len(), indices.iter().map(|&i| u[i])),
            LinearOperator::Decimate { dim, factor } => Vector::from_fn(dim / factor, |j, _| {
                (0..*factor).map(|i| u[j * factor + i]).sum::<f64>() / *factor as f64
            }),
            LinearOperator::CircularConv { dim, kernel } => {
                let n = *dim;
                let c = kernel.len() / 2;
                Vector::from_fn(n, |i, _| {
                    kernel.iter().enumerate().map(|(j, h)| h * u[(i + j + n - c) % n]).sum()
                })
            }
        })
    }

    /// Aᵀv.
    pub fn adjoint(&self, w: &Vector) -> Result<Vector> {
        check_dim("operator adjoint input", self.out_dim(), w.len())?;
        Ok(match self {
            LinearOperator::Dense { rows } => {
                let mut out = Vector::zeros(self.in_dim());
                for (r, wi) in rows.iter().zip(w.iter()) {
                    for (o, a) in out.iter_mut().zip(r) {
                        *o += a * wi;
                    }
                }
                out
            }
            LinearOperator::Mask { dim, indices } => {
                let mut out = Vector::zeros(*dim);
                for (k, &i) in indices.iter().enumerate() {
                    out[i] += w[k];
                }
                out
            }
            LinearOperator::Decimate { dim, factor } => Vector::from_fn(*dim, |i, _| w[i / factor] / *factor as f64),
            LinearOperator::CircularConv { dim, kernel } => {
                let n = *dim;
                let c = kernel.len() / 2;
                Vector::from_fn(n, |i, _| {
                    kernel.iter().enumerate().map(|(j, h)| h * w[(i + n + c - j) % n]).sum()
                })
            }
        })
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.in_dim();
        let mut m = Matrix::zeros(self.out_dim(), n);
        for k in 0..n {
            let mut e = Vector::zeros(n);
            e[k] = 1.0;
            let col = self.apply(&e).expect("basis vector has operator dimension");
            m.set_column(k, &col);
        }
        m
    }

    /// ‖A‖₂².
    pub fn norm_sq(&self) -> f64 {
        spectral_norm_sq(&self.to_dense())
    }
}

/// `log c(z) = -‖A z - y‖² / (2 σ_y²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianGuidance {
    operator: LinearOperator,
    y: Vector,
    sigma_y: f64,
    norm_sq: f64,
}

impl LinearGaussianGuidance {
    pub fn new(operator: LinearOperator, y: Vector, sigma_y: f64) -> Result<Self> {
        operator.validate()?;
        check_dim("measurement", operator.out_dim(), y.len())?;
        if !(sigma_y > 0.0 && sigma_y.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_y {sigma_y} must be positive")));
        }
        let norm_sq = operator.norm_sq();
        Ok(Self {
            operator,
            y,
            sigma_y,
            norm_sq,
        })
    }

    pub fn operator(&self) -> &LinearOperator {
        &self.operator
    }

    pub fn y(&self) -> &Vector {
        &self.y
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    fn residual(&self, z0: &Vector) -> Result<Vector> {
        Ok(self.operator.apply(z0)? - &self.y)
    }
}

impl GuidanceModel for LinearGaussianGuidance {
    fn dim(&self) -> usize {
        self.operator.in_dim()
    }

    fn log_c(&self, z0: &Vector) -> Result<f64> {
        Ok(-self.residual(z0)?.norm_squared() / (2.0 * self.sigma_y * self.sigma_y))
    }

    fn grad_log_c(&self, z0: &Vector) -> Result<Vector> {
        let r = self.residual(z0)?;
        Ok(-self.operator.adjoint(&r)? / (self.sigma_y * self.sigma_y))
    }

    fn smoothness_bound(&self) -> Option<f64> {
        Some(self.norm_sq / (self.sigma_y * self.sigma_y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    /// Timestep (block) index in the trajectory.
    pub index: usize,
    pub target: Vec<f64>,
}

/// Trajectory guidance: `log c(z) = -weight · Σ_i ‖yⁱ - P z_{block i}‖²`.
///
/// The trajectory is stored as consecutive blocks of `block` coordinates and
/// `coords` selects the constrained coordinates inside each block.
#[derive(Clone, Debug, PartialEq)]
pub struct WaypointGuidance {
    dim: usize,
    block: usize,
    coords: Vec<usize>,
    waypoints: Vec<Waypoint>,
    weight: f64,
}

impl WaypointGuidance {
    pub fn new(dim: usize, block: usize, coords: Vec<usize>, waypoints: Vec<Waypoint>, weight: f64) -> Result<Self> {
        if block == 0 || !dim.is_multiple_of(block) {
            return Err(Error::InvalidArgument(format!(
                "block {block} must divide dimension {dim}"
            )));
        }
        if coords.is_empty() || coords.iter().any(|c| *c >= block) {
            return Err(Error::InvalidArgument(
                "constrained coordinates must lie inside a block".into(),
            ));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight {weight} must be positive")));
        }
        for w in &waypoints {
            if w.index >= dim / block {
                return Err(Error::InvalidArgument(format!(
                    "waypoint index {} out of range",
                    w.index
                )));
            }
            check_dim("waypoint target", coords.len(), w.target.len())?;
        }
        Ok(Self {
            dim,
            block,
            coords,
            waypoints,
            weight,
        })
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Flat index of the `c`-th constrained coordinate of waypoint `w`.
    fn flat(&self, w: &Waypoint, c: usize) -> usize {
        w.index * self.block + self.coords[c]
    }

    /// The same likelihood written as masked linear-Gaussian guidance, with
    /// `σ² = 1 / (2 · weight)`.
    pub fn as_linear_gaussian(&self) -> Result<LinearGaussianGuidance> {
        let mut indices = Vec::new();
        let mut y = Vec::new();
        for w in &self.waypoints {
            for (c, t) in w.target.iter().enumerate() {
                indices.push(self.flat(w, c));
                y.push(*t);
            }
        }
        LinearGaussianGuidance::new(
            LinearOperator::Mask { dim: self.dim, indices },
            Vector::from_vec(y),
            (0.5 / self.weight).sqrt(),
        )
    }
}

impl GuidanceModel for WaypointGuidance {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_c(&self, z0: &Vector) -> Result<f64> {
        check_dim("log_c", self.dim, z0.len())?;
        let mut total = 0.0;
        for w in &self.waypoints {
            for (c, t) in w.target.iter().enumerate() {
                total += (t - z0[self.flat(w, c)]).powi(2);
            }
        }
        Ok(-self.weight * total)
    }

    fn grad_log_c(&self, z0: &Vector) -> Result<Vector> {
        check_dim("grad_log_c", self.dim, z0.len())?;
        let mut g = Vector::zeros(self.dim);
        for w in &self.waypoints {
            for (c, t) in w.target.iter().enumerate() {
                let i = self.flat(w, c);
                g[i] += 2.0 * self.weight * (t - z0[i]);
            }
        }
        Ok(g)
    }

    fn smoothness_bound(&self) -> Option<f64> {
        Some(2.0 * self.weight)
    }
}

/// Linear-Gaussian likelihood on the componentwise `tanh` features of z,
/// a smooth non-concave stand-in for feature-network guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct TanhFeatureGuidance {
    inner: LinearGaussianGuidance,
}

impl TanhFeatureGuidance {
    pub fn new(inner: LinearGaussianGuidance) -> Self {
        Self { inner }
    }

    pub fn inner(&self) -> &LinearGaussianGuidance {
        &self.inner
    }
}

impl GuidanceModel for TanhFeatureGuidance {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_c(&self, z0: &Vector) -> Result<f64> {
        self.inner.log_c(&z0.map(f64::tanh))
    }

    fn grad_log_c(&self, z0: &Vector) -> Result<Vector> {
        let feat = z0.map(f64::tanh);
        let outer = self.inner.grad_log_c(&feat)?;
        Ok(outer.component_mul(&feat.map(|t| 1.0 - t * t)))
    }

    fn smoothness_bound(&self) -> Option<f64> {
        None
    }
}

/// Uninformative condition: `log c ≡ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NullGuidance {
    dim: usize,
}

impl NullGuidance {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl GuidanceModel for NullGuidance {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_c(&self, z0: &Vector) -> Result<f64> {
        check_dim("log_c", self.dim, z0.len())?;
        Ok(0.0)
    }

    fn grad_log_c(&self, z0: &Vector) -> Result<Vector> {
        check_dim("grad_log_c", self.dim, z0.len())?;
        Ok(Vector::zeros(self.dim))
    }

    fn smoothness_bound(&self) -> Option<f64> {
        Some(0.0)
    }

    fn is_null(&self) -> bool {
        true
    }
}

/// Serialized guidance description. Measurements may be inline; when absent
/// they are generated from the task's ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuidanceSpec {
    LinearGaussian {
        operator: LinearOperator,
        sigma_y: f64,
        #[serde(default)]
        y: Option<Vec<f64>>,
        #[serde(default)]
        y_csv: Option<String>,
    },
    TanhFeature {
        operator: LinearOperator,
        sigma_y: f64,
        #[serde(default)]
        y: Option<Vec<f64>>,
    },
    Waypoint {
        block: usize,
        coords: Vec<usize>,
        indices: Vec<usize>,
        weight: f64,
        #[serde(default)]
        targets: Option<Vec<Vec<f64>>>,
    },
    Null,
}

/// Closed set of shipped guidance models.
#[derive(Clone, Debug, PartialEq)]
pub enum Guidance {
    LinearGaussian(LinearGaussianGuidance),
    TanhFeature(TanhFeatureGuidance),
    Waypoint(WaypointGuidance),
    Null(NullGuidance),
}

impl Guidance {
    pub fn as_model(&self) -> &dyn GuidanceModel {
        match self {
            Guidance::LinearGaussian(g) => g,
            Guidance::TanhFeature(g) => g,
            Guidance::Waypoint(g) => g,
            Guidance::Null(g) => g,
        }
    }

    /// Linear-Gaussian form of the likelihood, when it has one.
    pub fn linear_gaussian(&self) -> Option<LinearGaussianGuidance> {
        match self {
            Guidance::LinearGaussian(g) => Some(g.clone()),
            Guidance::Waypoint(w) => w.as_linear_gaussian().ok(),
            _ => None,
        }
    }
}

impl GuidanceModel for Guidance {
    fn dim(&self) -> usize {
        self.as_model().dim()
    }
    fn log_c(&self, z0: &Vector) -> Result<f64> {
        self.as_model().log_c(z0)
    }
    fn grad_log_c(&self, z0: &Vector) -> Result<Vector> {
        self.as_model().grad_log_c(z0)
    }
    fn smoothness_bound(&self) -> Option<f64> {
        self.as_model().smoothness_bound()
    }
    fn is_null(&self) -> bool {
        self.as_model().is_null()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, Rng};

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    fn operators() -> Vec<LinearOperator> {
        let mut rng = Rng::new(3, 0);
        vec![
            LinearOperator::dense(&Matrix::from_fn(4, 6, |_, _| rng.gaussian())),
            LinearOperator::Mask {
                dim: 6,
                indices: vec![0, 3, 5],
            },
            LinearOperator::Decimate { dim: 8, factor: 4 },
            LinearOperator::CircularConv {
                dim: 7,
                kernel: vec![0.2, 0.5, 0.3],
            },
        ]
    }

    #[test]
    fn identity_guidance_at_exact_fit() {
        let y = v(&[0.4, -1.0, 2.0]);
        let op = LinearOperator::dense(&Matrix::identity(3, 3));
        let g = LinearGaussianGuidance::new(op, y.clone(), 0.3).unwrap();
        assert_eq!(g.log_c(&y).unwrap(), 0.0);
        assert_eq!(g.grad_log_c(&y).unwrap().amax(), 0.0);
    }

    #[test]
    fn inpainting_example() {
        let op = LinearOperator::Mask {
            dim: 2,
            indices: vec![0],
        };
        let g = LinearGaussianGuidance::new(op, v(&[1.0]), 1.0).unwrap();
        let z = v(&[3.0, 7.0]);
        assert_eq!(g.log_c(&z).unwrap(), -2.0);
        assert_eq!(g.grad_log_c(&z).unwrap(), v(&[-2.0, 0.0]));
    }

    #[test]
    fn adjoint_identity_for_all_operators() {
        let mut rng = Rng::new(17, 0);
        for op in operators() {
            op.validate().unwrap();
            for _ in 0..100 {
                let u = rng.gaussian_vec(op.in_dim());
                let w = rng.gaussian_vec(op.out_dim());
                let lhs = op.apply(&u).unwrap().dot(&w);
                let rhs = u.dot(&op.adjoint(&w).unwrap());
                assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{op:?}");
            }
        }
    }

    #[test]
    fn dense_form_matches_apply() {
        let mut rng = Rng::new(23, 0);
        for op in operators() {
            let m = op.to_dense();
            let u = rng.gaussian_vec(op.in_dim());
            assert!((&m * &u - op.apply(&u).unwrap()).amax() < 1e-12);
        }
    }

    #[test]
    fn operator_validation() {
        assert!(LinearOperator::Mask {
            dim: 3,
            indices: vec![3]
        }
        .validate()
        .is_err());
        assert!(LinearOperator::Decimate { dim: 10, factor: 4 }.validate().is_err());
        assert!(LinearOperator::CircularConv {
            dim: 5,
            kernel: vec![0.5, 0.5]
        }
        .validate()
        .is_err());
        assert!(LinearGaussianGuidance::new(
            LinearOperator::Mask {
                dim: 3,
                indices: vec![0]
            },
            v(&[1.0]),
            0.0
        )
        .is_err());
    }

    #[test]
    fn tanh_guidance_gradient_matches_fd() {
        let mut rng = Rng::new(8, 0);
        let a = Matrix::from_fn(3, 4, |_, _| rng.gaussian());
        let inner = LinearGaussianGuidance::new(LinearOperator::dense(&a), rng.gaussian_vec(3), 0.7).unwrap();
        let g = TanhFeatureGuidance::new(inner);
        for _ in 0..20 {
            let z = rng.gaussian_vec(4);
            let fd = finite_diff_grad(|p| g.log_c(p).unwrap(), &z, 1e-5);
            let an = g.grad_log_c(&z).unwrap();
            assert!((fd - &an).norm() <= 1e-4 * (1.0 + an.norm()));
        }
    }

    #[test]
    fn waypoint_linear_form_agrees() {
        let w = WaypointGuidance::new(
            8,
            2,
            vec![0],
            vec![
                Waypoint {
                    index: 1,
                    target: vec![0.5],
                },
                Waypoint {
                    index: 3,
                    target: vec![-1.0],
                },
            ],
            1.5,
        )
        .unwrap();
        let lg = w.as_linear_gaussian().unwrap();
        let z = Vector::from_fn(8, |i, _| i as f64 * 0.1);
        assert!((w.log_c(&z).unwrap() - lg.log_c(&z).unwrap()).abs() < 1e-12);
        assert!((w.grad_log_c(&z).unwrap() - lg.grad_log_c(&z).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn null_guidance() {
        let g = NullGuidance::new(3);
        assert!(g.is_null());
        assert_eq!(g.log_c(&Vector::zeros(3)).unwrap(), 0.0);
        assert!(g.grad_log_c(&Vector::zeros(2)).is_err());
    }
}
