//! Shared numeric substrate: dense vectors and matrices, the seeded
//! counter-based RNG, finite differences, and the symmetric eigen helpers
//! used by the oracles.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Largest dimension accepted anywhere in the crate. Oracles are dense.
pub const MAX_DIM: usize = 512;

/// Seeded generator addressed by `(seed, stream)`.
///
/// Backed by ChaCha20 with the 64-bit stream id mapped to the cipher's
/// stream/nonce word, so each `(seed, stream)` pair names a fixed keystream.
/// Per-chain streams are therefore independent of scheduling order.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn substream(seed: u64, index: u64) -> Self {
        Self::new(seed, index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gaussian_vec(&mut self, dim: usize) -> Vector {
        Vector::from_fn(dim, |_, _| self.gaussian())
    }
}

/// `dim` i.i.d. standard normal coordinates.
pub fn gaussian_vec(rng: &mut Rng, dim: usize) -> Vector {
    rng.gaussian_vec(dim)
}

/// Central-difference gradient with step `h`.
pub fn finite_diff_grad<F>(f: F, x: &Vector, h: f64) -> Vector
where
    F: Fn(&Vector) -> f64,
{
    let mut probe = x.clone();
    Vector::from_fn(x.len(), |i, _| {
        let xi = x[i];
        probe[i] = xi + h;
        let up = f(&probe);
        probe[i] = xi - h;
        let down = f(&probe);
        probe[i] = xi;
        (up - down) / (2.0 * h)
    })
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition `A = Q diag(λ) Qᵀ` of the symmetric part of `a`.
pub fn sym_eigen(a: &Matrix) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(a))
}

/// Principal square root of a PSD matrix; eigenvalues are clamped at 0.
///
/// Rejects inputs whose most negative eigenvalue is below `-tol · max(1, ‖A‖)`.
pub fn sqrtm_psd(a: &Matrix, tol: f64) -> Result<Matrix> {
    let eig = sym_eigen(a);
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -tol * scale {
        return Err(Error::NotPsd(min));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Largest eigenvalue of `AᵀA`, i.e. the squared spectral norm.
pub fn spectral_norm_sq(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let gram = a.transpose() * a;
    sym_eigen(&gram).eigenvalues.max().max(0.0)
}

/// Sample mean and unbiased covariance of row samples.
pub fn mean_and_cov(samples: &[Vector]) -> Result<(Vector, Matrix)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let dim = first.len();
    let n = samples.len() as f64;
    let mut mean = Vector::zeros(dim);
    for s in samples {
        crate::error::check_dim("mean_and_cov", dim, s.len())?;
        mean += s;
    }
    mean /= n;
    let mut cov = Matrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    if samples.len() > 1 {
        cov /= n - 1.0;
    }
    Ok((mean, cov))
}

pub fn check_finite(context: &'static str, v: &Vector) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{context}: non-finite entry")))
    }
}
