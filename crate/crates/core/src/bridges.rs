//! Conditioning landmark diffusions on an endpoint.
//!
//! Two samplers are provided for `dX = a(X)^{1/2} dW` conditioned on
//! `X_T ≈ v`:
//!
//! * Delyon-Hu: drift `-(X - v)/(T - t)`, no weight.
//! * Guided proposals: drift `a(X) r̃(t, X)` with the score
//!   `r̃ = M(t)^{-1} (v - X)` of a zero-drift Gaussian auxiliary process with
//!   constant diffusion `ã`, where `M(t) = (T - t) ã + P` and `P` is the
//!   covariance of a noisy target (zero for an exact one). The proposal is
//!   corrected by `log w = ∫ G(t, X_t) dt` with
//!   `G = -½ tr[(a - ã)(M^{-1} - r̃ r̃ᵀ)]`.
//!
//! All covariance matrices here are `S ⊗ I_d` and are handled through their
//! `n x n` scalar factor `S`; the state is `n·d`, landmark-major.

use crate::error::{Error, Result};
use crate::kernels::{factor_psd, gram_g, KernelParams};
use crate::landmarks::LandmarkConfig;
use crate::noise::{exact_displacement, keyed_increment, NoiseBackend};
use crate::processes::{PathMeta, PathSample, ProcessSpec};
use crate::rng::NoiseStream;
use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::PI;

/// Brownian-bridge score `-(x - y)/(T - t)`.
pub fn score_delyon_hu(x: &[f64], y: &[f64], t: f64, horizon: f64) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch("state and target lengths differ".into()));
    }
    if !(t < horizon) {
        return Err(Error::InvalidTime(format!("score needs t < T, got t = {t}, T = {horizon}")));
    }
    let tau = horizon - t;
    Ok(x.iter().zip(y).map(|(a, b)| -(a - b) / tau).collect())
}

/// Auxiliary diffusion `ã = S ⊗ I_d`, frozen and constant in time.
#[derive(Clone, Debug, PartialEq)]
pub struct Auxiliary {
    pub gram: DMatrix<f64>,
    pub dim: usize,
    /// Where the frozen diffusion came from, recorded in outputs.
    pub source: String,
}

impl Auxiliary {
    pub fn new(gram: DMatrix<f64>, dim: usize, source: impl Into<String>) -> Result<Self> {
        if !gram.is_square() {
            return Err(Error::DimensionMismatch("auxiliary gram must be square".into()));
        }
        if gram.clone().cholesky().is_none() {
            return Err(Error::Factorization("auxiliary diffusion is not positive definite".into()));
        }
        Ok(Self { gram, dim, source: source.into() })
    }

    pub fn identity(n: usize, dim: usize) -> Self {
        Self { gram: DMatrix::identity(n, n), dim, source: "identity".into() }
    }

    /// Full `nd x nd` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        crate::kernels::expand_blocks(&self.gram, self.dim)
    }
}

/// Auxiliary frozen at the configuration `v`: `ã = G(v)`, with the same
/// diagonal jitter as `factor_psd` applied when `G(v)` is numerically
/// singular.
pub fn aux_from_observation(params: &KernelParams, v: &LandmarkConfig) -> Result<Auxiliary> {
    params.validate()?;
    if params.dim != v.dim() {
        return Err(Error::DimensionMismatch("kernel and configuration dimensions differ".into()));
    }
    let g = gram_g(params, v);
    let l = factor_psd(&g)?;
    let gram = if g.clone().cholesky().is_some() { g } else { &l * l.transpose() };
    Auxiliary::new(gram, v.dim(), "frozen_at_observation")
}

/// `((T - t) ã)^{-1} (y - x)`.
pub fn guided_score(aux: &Auxiliary, x: &[f64], y: &[f64], t: f64, horizon: f64) -> Result<Vec<f64>> {
    let n = aux.gram.nrows();
    if x.len() != n * aux.dim || y.len() != x.len() {
        return Err(Error::DimensionMismatch("state, target and auxiliary sizes differ".into()));
    }
    if !(t < horizon) {
        return Err(Error::InvalidTime(format!("score needs t < T, got t = {t}, T = {horizon}")));
    }
    let m = &aux.gram * (horizon - t);
    let chol = m.cholesky().ok_or_else(|| Error::Factorization("auxiliary diffusion is singular".into()))?;
    let diff = to_matrix(&y.iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>(), aux.dim);
    Ok(from_matrix(&chol.solve(&diff)))
}

/// State-dependent diffusion `a(x) = S(x) ⊗ I_d`.
pub trait Diffusion {
    /// Scalar `n x n` factor of `a(x)` for an `n·d` state.
    fn gram(&self, x: &[f64], dim: usize) -> Result<DMatrix<f64>>;
}

impl Diffusion for KernelParams {
    fn gram(&self, x: &[f64], dim: usize) -> Result<DMatrix<f64>> {
        Ok(gram_g(self, &LandmarkConfig::from_raw(x.to_vec(), dim)))
    }
}

/// `a(x) ≡ S`, independent of the state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantDiffusion(pub DMatrix<f64>);

impl Diffusion for ConstantDiffusion {
    fn gram(&self, _x: &[f64], _dim: usize) -> Result<DMatrix<f64>> {
        Ok(self.0.clone())
    }
}

fn to_matrix(v: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(v.len() / d, d, v)
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

/// Precomputed guiding term for one target.
///
/// `M(t)^{-1} = B diag(1 / ((T - t) λ_k + μ)) Bᵀ`, obtained from a
/// simultaneous diagonalization of `ã` and `P`.
#[derive(Clone, Debug)]
pub struct Guide {
    pub horizon: f64,
    pub dim: usize,
    target: DMatrix<f64>,
    aux: DMatrix<f64>,
    basis: DMatrix<f64>,
    lambda: Vec<f64>,
    /// 1 when the target covariance is positive definite, 0 for an exact target.
    mu: f64,
    /// `log det P` (0 for an exact target).
    logdet_p: f64,
}

impl Guide {
    /// Guide towards `N(target, P ⊗ I_d)` with `P = target_cov` (or exact).
    pub fn new(aux: &Auxiliary, target: &[f64], target_cov: Option<&DMatrix<f64>>, horizon: f64) -> Result<Self> {
        let n = aux.gram.nrows();
        let d = aux.dim;
        if target.len() != n * d {
            return Err(Error::DimensionMismatch("target and auxiliary sizes differ".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidTime(format!("horizon must be > 0, got {horizon}")));
        }
        let (basis, lambda, mu, logdet_p) = match target_cov.filter(|p| p.iter().any(|&v| v != 0.0)) {
            None => {
                let eig = SymmetricEigen::new(aux.gram.clone());
                (eig.eigenvectors, eig.eigenvalues.iter().copied().collect::<Vec<_>>(), 0.0, 0.0)
            }
            Some(p) => {
                if p.shape() != (n, n) {
                    return Err(Error::DimensionMismatch("target covariance has the wrong size".into()));
                }
                let l = p
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Factorization("target covariance is not positive definite".into()))?
                    .l();
                let linv = l
                    .clone()
                    .solve_lower_triangular(&DMatrix::identity(n, n))
                    .ok_or_else(|| Error::Factorization("singular target covariance factor".into()))?;
                let c = &linv * &aux.gram * linv.transpose();
                let c = (&c + c.transpose()) * 0.5;
                let eig = SymmetricEigen::new(c);
                let basis = linv.transpose() * eig.eigenvectors;
                let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                (basis, eig.eigenvalues.iter().copied().collect(), 1.0, logdet)
            }
        };
        if lambda.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Factorization("auxiliary diffusion is not positive definite".into()));
        }
        Ok(Self {
            horizon,
            dim: d,
            target: to_matrix(target, d),
            aux: aux.gram.clone(),
            basis,
            lambda,
            mu,
            logdet_p,
        })
    }

    /// Whether the target is noisy, in which case guiding is defined up to
    /// and including `t = T`.
    pub fn noisy_target(&self) -> bool {
        self.mu > 0.0
    }

    fn spectrum(&self, t: f64) -> Vec<f64> {
        let tau = self.horizon - t;
        self.lambda.iter().map(|l| 1.0 / (tau * l + self.mu)).collect()
    }

    fn apply_inverse(&self, spec: &[f64], r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = self.basis.transpose() * r;
        for (k, s) in spec.iter().enumerate() {
            c.row_mut(k).scale_mut(*s);
        }
        &self.basis * c
    }

    /// `M(t)^{-1} (v - x)` as an `n x d` matrix.
    pub fn score(&self, t: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_inverse(&self.spectrum(t), &(&self.target - x))
    }

    /// `log p̃(t, x)`: log density of the target under the auxiliary
    /// process started from `x` at time `t`.
    pub fn log_density(&self, t: f64, x: &[f64]) -> f64 {
        let spec = self.spectrum(t);
        let xm = to_matrix(x, self.dim);
        let resid = &self.target - &xm;
        let r = self.apply_inverse(&spec, &resid);
        let quad = resid.component_mul(&r).sum();
        let n = self.lambda.len() as f64;
        let tau = self.horizon - t;
        // det M = det P · Π (τ λ_k + μ)  (with det P := 1 for an exact target)
        let logdet = self.logdet_p + self.lambda.iter().map(|l| (tau * l + self.mu).ln()).sum::<f64>();
        -0.5 * (self.dim as f64 * (n * (2.0 * PI).ln() + logdet) + quad)
    }

    /// `G(t, x)` for the diffusion gram `a = a(x)` and score `r`.
    #[cfg(test)]
    fn weight_rate(&self, t: f64, a: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
        self.weight_rate_and_mismatch(t, a, r).0
    }

    /// `G(t, x)` together with `‖M^{-1/2} (a - ã) M^{-1/2}‖_F`, the rate at
    /// which the diffusion mismatch acts on the guiding term.
    fn weight_rate_and_mismatch(&self, t: f64, a: &DMatrix<f64>, r: &DMatrix<f64>) -> (f64, f64) {
        let diff = a - &self.aux;
        let spec = self.spectrum(t);
        let proj = self.basis.transpose() * &diff * &self.basis;
        let tr: f64 = spec.iter().enumerate().map(|(k, s)| s * proj[(k, k)]).sum();
        let quad = (&diff * r).component_mul(r).sum();
        let mut fro = 0.0;
        for k in 0..spec.len() {
            for l in 0..spec.len() {
                fro += spec[k] * spec[l] * proj[(k, l)] * proj[(k, l)];
            }
        }
        (-0.5 * (self.dim as f64 * tr - quad), fro.sqrt())
    }
}

/// Output of a guided run driven by explicit innovations.
#[derive(Clone, Debug)]
pub struct GuidedRun {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub log_weight: f64,
    /// Largest `dt · ‖M^{-1/2} (a - ã) M^{-1/2}‖_F` over the steps. Values
    /// well above one mean the weight integral is not resolved by the grid.
    pub stiffness: f64,
}

/// Time stepping of the guided SDE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidedScheme {
    /// Plain Euler-Maruyama.
    #[default]
    Euler,
    /// Euler-Maruyama with the guiding drift `a(X_k) M(t_{k+1})^{-1} (v - X)`
    /// taken implicitly in `X`. `a M^{-1}` is a product of two positive
    /// definite matrices, so its eigenvalues are positive and the step is
    /// stable for any `dt`. Useful when the target covariance is small
    /// compared with the mismatch between `a(x)` and `ã`.
    DriftImplicit,
}

/// Euler-Maruyama guided bridge over `steps` equal steps of `[0, T]`.
///
/// `innovation(s)` returns standard normal innovations (`n·d`) for step `s`.
/// For an exact target the run stops at `T - dt`; for a noisy target it
/// continues to `T`. When `record` is false only the initial and final
/// states are kept.
pub fn run_guided<D, F>(
    diffusion: &D,
    guide: &Guide,
    x0: &[f64],
    steps: usize,
    innovation: F,
    record: bool,
) -> Result<GuidedRun>
where
    D: Diffusion + ?Sized,
    F: FnMut(usize) -> Vec<f64>,
{
    run_guided_with(diffusion, guide, x0, steps, innovation, record, GuidedScheme::Euler)
}

/// `run_guided` with a choice of scheme. The weight integral is a
/// left-point sum in both cases.
pub fn run_guided_with<D, F>(
    diffusion: &D,
    guide: &Guide,
    x0: &[f64],
    steps: usize,
    mut innovation: F,
    record: bool,
    scheme: GuidedScheme,
) -> Result<GuidedRun>
where
    D: Diffusion + ?Sized,
    F: FnMut(usize) -> Vec<f64>,
{
    let d = guide.dim;
    let n = guide.lambda.len();
    if x0.len() != n * d {
        return Err(Error::DimensionMismatch("initial state and target sizes differ".into()));
    }
    let active = if guide.noisy_target() { steps } else { steps.saturating_sub(1) };
    if active == 0 {
        return Err(Error::InvalidTime("bridge needs at least two steps towards an exact target".into()));
    }
    let dt = guide.horizon / steps as f64;
    let sdt = dt.sqrt();
    let mut x = to_matrix(x0, d);
    let mut times = vec![0.0];
    let mut positions = vec![x0.to_vec()];
    let mut log_weight = 0.0;
    let mut stiffness: f64 = 0.0;
    for s in 0..active {
        let t = s as f64 * dt;
        let xs = from_matrix(&x);
        let a = diffusion.gram(&xs, d)?;
        let r = guide.score(t, &x);
        let (rate, mismatch) = guide.weight_rate_and_mismatch(t, &a, &r);
        log_weight += rate * dt;
        stiffness = f64::max(stiffness, mismatch * dt);
        let l = factor_psd(&a)?;
        let z = innovation(s);
        if z.len() != n * d {
            return Err(Error::DimensionMismatch("innovation has the wrong length".into()));
        }
        let noise = exact_displacement(&l, &z, d);
        match scheme {
            GuidedScheme::Euler => {
                let drift = &a * &r;
                for i in 0..n {
                    for c in 0..d {
                        x[(i, c)] += drift[(i, c)] * dt + sdt * noise[i * d + c];
                    }
                }
            }
            GuidedScheme::DriftImplicit => {
                // (I + dt a M⁻¹) x' = x + dt a M⁻¹ v + √dt noise, with M at
                // the end of the step; for a = ã this moves the mean exactly
                // along the straight line to the target
                let spec = guide.spectrum(t + dt);
                let mut scaled = guide.basis.transpose();
                for (k, sp) in spec.iter().enumerate() {
                    scaled.row_mut(k).scale_mut(*sp);
                }
                let am = &a * (&guide.basis * scaled) * dt;
                let mut rhs = &x + &am * &guide.target;
                for i in 0..n {
                    for c in 0..d {
                        rhs[(i, c)] += sdt * noise[i * d + c];
                    }
                }
                let k = DMatrix::identity(n, n) + am;
                x = k.lu().solve(&rhs).ok_or_else(|| Error::Factorization("singular implicit step".into()))?;
            }
        }
        if x.iter().any(|v| !v.is_finite()) || !log_weight.is_finite() {
            return Err(Error::Diverged { time: t + dt });
        }
        if record || s + 1 == active {
            times.push(t + dt);
            positions.push(from_matrix(&x));
        }
    }
    Ok(GuidedRun { times, positions, log_weight, stiffness })
}

/// Euler-Maruyama Delyon-Hu bridge to `y` over `[0, T - dt]`.
pub fn run_delyon_hu<D, F>(
    diffusion: &D,
    y: &[f64],
    dim: usize,
    x0: &[f64],
    horizon: f64,
    steps: usize,
    mut innovation: F,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    D: Diffusion + ?Sized,
    F: FnMut(usize) -> Vec<f64>,
{
    if x0.len() != y.len() {
        return Err(Error::DimensionMismatch("initial state and target sizes differ".into()));
    }
    if steps < 2 {
        return Err(Error::InvalidTime("bridge needs at least two steps".into()));
    }
    let dt = horizon / steps as f64;
    let sdt = dt.sqrt();
    let mut x = x0.to_vec();
    let mut times = vec![0.0];
    let mut positions = vec![x.clone()];
    for s in 0..steps - 1 {
        let t = s as f64 * dt;
        let a = diffusion.gram(&x, dim)?;
        let l = factor_psd(&a)?;
        let noise = exact_displacement(&l, &innovation(s), dim);
        let score = score_delyon_hu(&x, y, t, horizon)?;
        for i in 0..x.len() {
            x[i] += score[i] * dt + sdt * noise[i];
        }
        times.push(t + dt);
        positions.push(x.clone());
    }
    Ok((times, positions))
}

/// Bridge sampler.
#[derive(Clone, Debug, PartialEq)]
pub enum BridgeMethod {
    DelyonHu,
    Guided { aux: Auxiliary },
}

/// Endpoint conditioning problem.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSpec {
    pub target: LandmarkConfig,
    pub horizon: f64,
    pub method: BridgeMethod,
    pub steps: usize,
    /// Append `X_T = y` to Delyon-Hu paths.
    pub clamp: bool,
    /// Observation noise variance `ε²` of the target; zero for an exact target.
    pub obs_variance: f64,
    /// Time stepping of guided runs.
    pub scheme: GuidedScheme,
}

/// Bridge path with its log importance weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedPath {
    pub path: PathSample,
    pub log_weight: f64,
    /// Auxiliary provenance for guided runs.
    pub aux_source: Option<String>,
}

/// Simulates a bridge of the Kunita landmark process (zero drift, diffusion
/// `G(x)`) from `x0` to `spec.target`, or of a constant-diffusion process
/// when `constant` is given. Innovations are keyed by `(step, landmark,
/// axis)` on `stream`.
pub fn simulate_bridge(
    spec: &BridgeSpec,
    process: &ProcessSpec,
    x0: &LandmarkConfig,
    backend: &NoiseBackend,
    stream: &NoiseStream,
) -> Result<WeightedPath> {
    let params = match process {
        ProcessSpec::KunitaLandmark { params, .. } => *params,
        _ => return Err(Error::Unsupported("bridges are defined for the Kunita landmark process".into())),
    };
    params.validate()?;
    simulate_bridge_with(spec, &params, x0, backend, stream)
}

/// `simulate_bridge` for any diffusion.
pub fn simulate_bridge_with<D: Diffusion + ?Sized>(
    spec: &BridgeSpec,
    diffusion: &D,
    x0: &LandmarkConfig,
    backend: &NoiseBackend,
    stream: &NoiseStream,
) -> Result<WeightedPath> {
    if !matches!(backend, NoiseBackend::ExactCovariance) {
        return Err(Error::Unsupported("bridges use the exact covariance backend".into()));
    }
    let d = x0.dim();
    let n = x0.len();
    if spec.target.dim() != d || spec.target.len() != n {
        return Err(Error::DimensionMismatch("start and target configurations differ in shape".into()));
    }
    if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
        return Err(Error::InvalidTime(format!("horizon must be > 0, got {}", spec.horizon)));
    }
    if spec.steps < 2 {
        return Err(Error::InvalidTime("bridge needs at least two steps".into()));
    }
    if !(spec.obs_variance >= 0.0 && spec.obs_variance.is_finite()) {
        return Err(Error::ParameterDomain("observation variance must be >= 0".into()));
    }
    let innovation = |s: usize| keyed_increment(n, d, 1.0, stream, s as u64).values;
    let y = spec.target.coords();
    let dt = spec.horizon / spec.steps as f64;
    let mut meta = PathMeta {
        process: "kunita".into(),
        convention: "ito".into(),
        backend: backend.name().into(),
        seed: stream.seed,
        stream: stream.stream,
        dt,
    };
    match &spec.method {
        BridgeMethod::DelyonHu => {
            meta.process = "kunita_bridge_delyon_hu".into();
            let (mut times, mut positions) =
                run_delyon_hu(diffusion, y, d, x0.coords(), spec.horizon, spec.steps, innovation)?;
            if spec.clamp {
                times.push(spec.horizon);
                positions.push(y.to_vec());
            }
            let path = PathSample { dim: d, times, positions, momenta: None, meta, collision: None };
            Ok(WeightedPath { path, log_weight: 0.0, aux_source: None })
        }
        BridgeMethod::Guided { aux } => {
            meta.process = "kunita_bridge_guided".into();
            if aux.gram.nrows() != n || aux.dim != d {
                return Err(Error::DimensionMismatch("auxiliary does not match the configuration".into()));
            }
            let p = (spec.obs_variance > 0.0).then(|| DMatrix::identity(n, n) * spec.obs_variance);
            let guide = Guide::new(aux, y, p.as_ref(), spec.horizon)?;
            let run = run_guided_with(diffusion, &guide, x0.coords(), spec.steps, innovation, true, spec.scheme)?;
            let path = PathSample { dim: d, times: run.times, positions: run.positions, momenta: None, meta, collision: None };
            Ok(WeightedPath { path, log_weight: run.log_weight, aux_source: Some(aux.source.clone()) })
        }
    }
}
