//! Radial flow kernels `k`, their squares `g = k * k`, and kernel matrices.
//!
//! Both families are scalar and radial: `k(x, y) = k(|x - y|) I_d`. The
//! square `g(x, y) = int k(x, z) k(z, y) dz` is the covariance kernel of the
//! induced flow and is available in closed form for both families.
//!
//! Matrices over a landmark configuration come in two shapes. The `gram_*`
//! functions return the `n x n` scalar Gram matrix `[k(|x_i - x_j|)]`; the
//! `kernel_matrix_*` functions return the full `nd x nd` matrix
//! `gram ⊗ I_d` in landmark-major order (landmark index varies slowest, each
//! block is `d x d`).

pub mod bessel;

use crate::error::{Error, Result};
use crate::landmarks::LandmarkConfig;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::f64::consts::PI;

pub use bessel::bessel_k;

/// Kernel family with its family-specific parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    /// Matérn / Bessel kernel, Green's function of `(Id - sigma^2 Δ)^c`.
    Matern { c: f64 },
}

/// Parameters of a flow kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    #[serde(flatten)]
    pub family: KernelFamily,
    /// Amplitude, `k(0) = alpha`.
    pub alpha: f64,
    /// Length scale in ambient coordinate units.
    pub sigma: f64,
    /// Ambient dimension, 1 to 3.
    pub dim: usize,
}

/// Matérn with `c = 7/2`, `α = σ = 1` in the plane.
impl Default for KernelParams {
    fn default() -> Self {
        Self { family: KernelFamily::Matern { c: 3.5 }, alpha: 1.0, sigma: 1.0, dim: 2 }
    }
}

impl KernelParams {
    pub fn squared_exponential(alpha: f64, sigma: f64, dim: usize) -> Result<Self> {
        let p = Self { family: KernelFamily::SquaredExponential, alpha, sigma, dim };
        p.validate()?;
        Ok(p)
    }

    pub fn matern(alpha: f64, sigma: f64, c: f64, dim: usize) -> Result<Self> {
        let p = Self { family: KernelFamily::Matern { c }, alpha, sigma, dim };
        p.validate()?;
        Ok(p)
    }

    /// Same family and dimension with a new amplitude and length scale.
    pub fn with_scales(&self, alpha: f64, sigma: f64) -> Result<Self> {
        let p = Self { alpha, sigma, ..*self };
        p.validate()?;
        Ok(p)
    }

    /// Checks the parameter domain. `alpha = 0` is accepted and yields the
    /// degenerate zero kernel.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::ParameterDomain(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::ParameterDomain(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(1..=3).contains(&self.dim) {
            return Err(Error::ParameterDomain(format!("dimension must be 1..=3, got {}", self.dim)));
        }
        if let KernelFamily::Matern { c } = self.family {
            let d2 = self.dim as f64 / 2.0;
            if !(c > d2 && c.is_finite()) {
                return Err(Error::ParameterDomain(format!(
                    "Matérn order c = {c} must exceed d/2 = {d2}"
                )));
            }
        }
        Ok(())
    }

    /// Matérn smoothness `nu = c - d/2`, if applicable.
    pub fn nu(&self) -> Option<f64> {
        match self.family {
            KernelFamily::Matern { c } => Some(c - self.dim as f64 / 2.0),
            KernelFamily::SquaredExponential => None,
        }
    }

    /// `k(r)`.
    pub fn k(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => {
                self.alpha * (-r * r / (2.0 * self.sigma * self.sigma)).exp()
            }
            KernelFamily::Matern { c } => {
                if r == 0.0 {
                    return self.alpha;
                }
                let nu = c - self.dim as f64 / 2.0;
                self.alpha * 2f64.powf(1.0 - nu) / gamma(nu) * bessel::z_pow_k(nu, r / self.sigma)
            }
        }
    }

    /// Radial derivative `k'(r)`.
    pub fn k_prime(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => -r / (self.sigma * self.sigma) * self.k(r),
            KernelFamily::Matern { c } => {
                let nu = c - self.dim as f64 / 2.0;
                if r == 0.0 {
                    return if nu > 0.5 {
                        0.0
                    } else {
                        -self.alpha / self.sigma
                    };
                }
                // d/dz [z^nu K_nu(z)] = -z^nu K_{nu-1}(z)
                let z = r / self.sigma;
                -self.alpha * 2f64.powf(1.0 - nu) / gamma(nu) * z.powf(nu) * bessel_k(nu - 1.0, z)
                    / self.sigma
            }
        }
    }

    /// `k'(r) / r`, the factor in `∇_x k(|x - y|) = (k'(r)/r) (x - y)`.
    ///
    /// At `r = 0` the finite limit is returned when it exists. For Matérn
    /// with `nu <= 1` the limit diverges; 0 is returned since the factor only
    /// ever multiplies the zero vector there.
    pub fn grad_factor(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => -self.k(r) / (self.sigma * self.sigma),
            KernelFamily::Matern { c } => {
                let nu = c - self.dim as f64 / 2.0;
                let pre = -self.alpha * 2f64.powf(1.0 - nu) / gamma(nu) / (self.sigma * self.sigma);
                if r == 0.0 {
                    return if nu > 1.0 {
                        pre * 2f64.powf(nu - 2.0) * gamma(nu - 1.0)
                    } else {
                        0.0
                    };
                }
                let z = r / self.sigma;
                pre * z.powf(nu - 1.0) * bessel_k(nu - 1.0, z)
            }
        }
    }

    /// Shape-process variance `var(Q) = g(0)`.
    pub fn variance(&self) -> f64 {
        let d = self.dim as f64;
        let a2 = self.alpha * self.alpha;
        let sd = self.sigma.powf(d);
        match self.family {
            KernelFamily::SquaredExponential => a2 * PI.powf(d / 2.0) * sd,
            KernelFamily::Matern { c } => {
                let nu = c - d / 2.0;
                let gc = gamma(c);
                let gn = gamma(nu);
                a2 * 2f64.powf(d) * PI.powf(d / 2.0) * sd * gc * gc / (gn * gn)
                    * gamma(2.0 * c - d / 2.0)
                    / gamma(2.0 * c)
            }
        }
    }

    /// `g(r)`, the self-convolution of `k`.
    pub fn g(&self, r: f64) -> f64 {
        self.variance() * self.g_shape(r)
    }

    /// `g(r) / g(0)`.
    fn g_shape(&self, r: f64) -> f64 {
        if r == 0.0 {
            return 1.0;
        }
        match self.family {
            KernelFamily::SquaredExponential => (-r * r / (4.0 * self.sigma * self.sigma)).exp(),
            KernelFamily::Matern { c } => {
                let mu = 2.0 * c - self.dim as f64 / 2.0;
                2f64.powf(1.0 - mu) / gamma(mu) * bessel::z_pow_k(mu, r / self.sigma)
            }
        }
    }

    /// Evaluator for `g` with the constants hoisted out, for inner loops.
    pub fn g_evaluator(&self) -> impl Fn(f64) -> f64 + '_ {
        let var = self.variance();
        let (mu, norm) = match self.family {
            KernelFamily::Matern { c } => {
                let mu = 2.0 * c - self.dim as f64 / 2.0;
                (mu, var * 2f64.powf(1.0 - mu) / gamma(mu))
            }
            KernelFamily::SquaredExponential => (0.0, var),
        };
        let inv4s2 = 1.0 / (4.0 * self.sigma * self.sigma);
        move |r: f64| {
            if r == 0.0 {
                return var;
            }
            match self.family {
                KernelFamily::SquaredExponential => var * (-r * r * inv4s2).exp(),
                KernelFamily::Matern { .. } => norm * bessel::z_pow_k(mu, r / self.sigma),
            }
        }
    }
}

/// `k(r)` with parameter validation.
pub fn eval_k(params: &KernelParams, r: f64) -> Result<f64> {
    params.validate()?;
    check_radius(r)?;
    Ok(params.k(r))
}

/// `g(r)` with parameter validation.
pub fn eval_g(params: &KernelParams, r: f64) -> Result<f64> {
    params.validate()?;
    check_radius(r)?;
    Ok(params.g(r))
}

/// `var(Q)`, the unit-normalized trace of the flow covariance operator.
pub fn variance(params: &KernelParams) -> Result<f64> {
    params.validate()?;
    Ok(params.variance())
}

fn check_radius(r: f64) -> Result<()> {
    if r >= 0.0 {
        Ok(())
    } else {
        Err(Error::ParameterDomain(format!("radius must be >= 0, got {r}")))
    }
}

fn check_dim(params: &KernelParams, x: &LandmarkConfig) -> Result<()> {
    if params.dim != x.dim() {
        return Err(Error::DimensionMismatch(format!(
            "kernel dimension {} vs configuration dimension {}",
            params.dim,
            x.dim()
        )));
    }
    Ok(())
}

fn gram_with<F: Fn(f64) -> f64>(x: &LandmarkConfig, f: F) -> DMatrix<f64> {
    let n = x.len();
    let mut m = DMatrix::zeros(n, n);
    let diag = f(0.0);
    for i in 0..n {
        m[(i, i)] = diag;
        for j in (i + 1)..n {
            let v = f(x.distance(i, j));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Scalar `n x n` Gram matrix `[g(|x_i - x_j|)]`.
pub fn gram_g(params: &KernelParams, x: &LandmarkConfig) -> DMatrix<f64> {
    gram_with(x, params.g_evaluator())
}

/// Scalar `n x n` Gram matrix `[k(|x_i - x_j|)]`.
pub fn gram_k(params: &KernelParams, x: &LandmarkConfig) -> DMatrix<f64> {
    gram_with(x, |r| params.k(r))
}

/// Expand a scalar `n x n` matrix `S` to `S ⊗ I_d`, landmark-major.
pub fn expand_blocks(s: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    s.kronecker(&DMatrix::identity(d, d))
}

/// Covariance matrix of the infinitesimal landmark steps, `nd x nd`.
pub fn kernel_matrix_g(params: &KernelParams, x: &LandmarkConfig) -> Result<DMatrix<f64>> {
    params.validate()?;
    check_dim(params, x)?;
    Ok(expand_blocks(&gram_g(params, x), x.dim()))
}

/// Cometric matrix `K(x)`, `nd x nd`.
pub fn kernel_matrix_k(params: &KernelParams, x: &LandmarkConfig) -> Result<DMatrix<f64>> {
    params.validate()?;
    check_dim(params, x)?;
    Ok(expand_blocks(&gram_k(params, x), x.dim()))
}

/// Lower-triangular `L` with `L Lᵀ ≈ M` for symmetric positive semidefinite `M`.
///
/// A diagonal jitter of `1e-10 · tr(M)/n` is added before factoring and is
/// raised tenfold per failed attempt, up to `1e-6 · tr(M)/n`. The zero
/// matrix factors to zero.
pub fn factor_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch(format!("{}x{} is not square", n, m.ncols())));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let scale = m.trace() / n as f64;
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::Factorization(format!("matrix has trace/n = {scale}")));
    }
    if scale == 0.0 {
        if m.iter().all(|&v| v == 0.0) {
            return Ok(DMatrix::zeros(n, n));
        }
        return Err(Error::Factorization("zero trace with nonzero entries".into()));
    }
    let mut jitter = 1e-10;
    while jitter <= 1e-6 * (1.0 + 1e-9) {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter * scale;
        }
        if let Some(ch) = a.cholesky() {
            return Ok(ch.l());
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization(format!(
        "matrix is indefinite beyond the maximal jitter {:e}",
        1e-6 * scale
    )))
}
