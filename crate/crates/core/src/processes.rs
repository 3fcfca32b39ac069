//! Time integration of the landmark shape SDEs.
//!
//! | process              | state  | scheme                     | noise                     |
//! |----------------------|--------|----------------------------|---------------------------|
//! | Kunita landmark flow | x      | Euler-Maruyama / Euler-Heun | backend (grid or exact)  |
//! | Riemannian BM        | x      | Euler-Maruyama             | `K(x)^{1/2} dW`           |
//! | stochastic EPDiff    | x, p   | Euler-Heun (Stratonovich)  | grid noise fields         |
//! | inner momentum noise | x, p   | Euler-Maruyama             | `dp += s dW`              |
//! | Langevin             | x, p   | Euler-Maruyama             | `dp += s dW`              |
//!
//! Landmark-space increments for the last three rows are keyed by
//! `(step, landmark, axis)` on the supplied stream.

use crate::error::{Error, Result};
use crate::kernels::{factor_psd, gram_k, KernelFamily, KernelParams};
use crate::landmarks::{dist, hamiltonian_vector_field, min_pairwise, LandmarkConfig, Momentum, COLLISION_TOLERANCE};
use crate::noise::{exact_displacement, grid_displacement, keyed_increment, sample_increment, GridKernel, NoiseBackend, NoiseGrid};
use crate::rng::NoiseStream;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Stochastic integral convention for the Kunita flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    #[default]
    Ito,
    Stratonovich,
}

impl Convention {
    pub fn name(&self) -> &'static str {
        match self {
            Convention::Ito => "ito",
            Convention::Stratonovich => "stratonovich",
        }
    }
}

/// The SDE to integrate.
#[derive(Clone, Debug, PartialEq)]
pub enum ProcessSpec {
    KunitaLandmark { params: KernelParams, convention: Convention },
    RiemannianBM { params: KernelParams },
    /// Noise fields `σ_{j,a}(x) = k(|x - ζ_j|) h^{d/2} e_a` on the grid nodes.
    StochasticEPDiff { params: KernelParams, grid: NoiseGrid },
    InnerMomentumNoise { params: KernelParams, noise_scale: f64 },
    Langevin { params: KernelParams, dissipation: f64, noise_scale: f64 },
}

impl ProcessSpec {
    pub fn params(&self) -> &KernelParams {
        match self {
            ProcessSpec::KunitaLandmark { params, .. }
            | ProcessSpec::RiemannianBM { params }
            | ProcessSpec::StochasticEPDiff { params, .. }
            | ProcessSpec::InnerMomentumNoise { params, .. }
            | ProcessSpec::Langevin { params, .. } => params,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProcessSpec::KunitaLandmark { .. } => "kunita",
            ProcessSpec::RiemannianBM { .. } => "riemannian_bm",
            ProcessSpec::StochasticEPDiff { .. } => "stochastic_epdiff",
            ProcessSpec::InnerMomentumNoise { .. } => "inner_momentum_noise",
            ProcessSpec::Langevin { .. } => "langevin",
        }
    }

    fn has_momentum(&self) -> bool {
        !matches!(self, ProcessSpec::KunitaLandmark { .. } | ProcessSpec::RiemannianBM { .. })
    }

    fn validate(&self) -> Result<()> {
        self.params().validate()?;
        match self {
            ProcessSpec::InnerMomentumNoise { noise_scale, .. } if !(*noise_scale >= 0.0 && noise_scale.is_finite()) => {
                Err(Error::ParameterDomain(format!("noise scale must be >= 0, got {noise_scale}")))
            }
            ProcessSpec::Langevin { dissipation, noise_scale, .. } => {
                if !(*dissipation >= 0.0 && dissipation.is_finite()) {
                    return Err(Error::ParameterDomain(format!("dissipation must be >= 0, got {dissipation}")));
                }
                if !(*noise_scale >= 0.0 && noise_scale.is_finite()) {
                    return Err(Error::ParameterDomain(format!("noise scale must be >= 0, got {noise_scale}")));
                }
                Ok(())
            }
            ProcessSpec::StochasticEPDiff { params, grid } if grid.dim() != params.dim => {
                Err(Error::DimensionMismatch("EPDiff grid and kernel dimensions differ".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Descriptive metadata carried with every path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathMeta {
    pub process: String,
    pub convention: String,
    pub backend: String,
    pub seed: u64,
    pub stream: u64,
    pub dt: f64,
}

/// Two landmarks came closer than the collision tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collision {
    pub time: f64,
    pub i: usize,
    pub j: usize,
}

/// A simulated trajectory. `positions[s]` and `momenta[s]` hold the `n·d`
/// state at `times[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub dim: usize,
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub momenta: Option<Vec<Vec<f64>>>,
    pub meta: PathMeta,
    /// Set when the run halted early on a collision; the path ends at the
    /// last state before the collision.
    pub collision: Option<Collision>,
}

impl PathSample {
    pub fn landmarks(&self) -> usize {
        self.positions[0].len() / self.dim
    }

    pub fn final_position(&self) -> &[f64] {
        self.positions.last().expect("path has an initial state")
    }

    pub fn final_config(&self) -> LandmarkConfig {
        LandmarkConfig::from_raw(self.final_position().to_vec(), self.dim)
    }
}

fn check_time(duration: f64, steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::InvalidTime("steps must be >= 1".into()));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::InvalidTime(format!("duration must be > 0, got {duration}")));
    }
    Ok(duration / steps as f64)
}

/// Integrates `spec` from `x0` (and `p0` for the momentum variants) over
/// `[0, duration]` with `steps` equal steps.
///
/// The Kunita flow is driven by `backend`; EPDiff uses the grid in its spec;
/// the remaining variants draw landmark-space increments and ignore
/// `backend`. A collision halts the run and is reported in the result.
pub fn simulate(
    spec: &ProcessSpec,
    x0: &LandmarkConfig,
    p0: Option<&Momentum>,
    duration: f64,
    steps: usize,
    backend: &NoiseBackend,
    stream: &NoiseStream,
) -> Result<PathSample> {
    spec.validate()?;
    let dt = check_time(duration, steps)?;
    let params = *spec.params();
    let d = x0.dim();
    let n = x0.len();
    if params.dim != d {
        return Err(Error::DimensionMismatch("kernel and configuration dimensions differ".into()));
    }
    let p0 = if spec.has_momentum() {
        let p = p0.ok_or_else(|| Error::InvalidConfig(format!("{} requires an initial momentum", spec.name())))?;
        if p.dim() != d || p.len() != n {
            return Err(Error::DimensionMismatch("momentum and configuration shapes differ".into()));
        }
        Some(p.coords().to_vec())
    } else {
        None
    };
    let (convention, backend_name) = match spec {
        ProcessSpec::KunitaLandmark { convention, .. } => (*convention, backend.name()),
        ProcessSpec::StochasticEPDiff { .. } => (Convention::Stratonovich, "grid_quadrature"),
        _ => (Convention::Ito, "landmark"),
    };
    if let (ProcessSpec::RiemannianBM { params }, KernelFamily::Matern { .. }) = (spec, params.family) {
        check_smooth(params)?;
    }
    let meta = PathMeta {
        process: spec.name().into(),
        convention: convention.name().into(),
        backend: backend_name.into(),
        seed: stream.seed,
        stream: stream.stream,
        dt,
    };

    let mut x = x0.coords().to_vec();
    let mut p = p0;
    let mut path = PathSample {
        dim: d,
        times: vec![0.0],
        positions: vec![x.clone()],
        momenta: p.as_ref().map(|p| vec![p.clone()]),
        meta,
        collision: None,
    };
    let tol = COLLISION_TOLERANCE * params.sigma;
    let grid_kernel = GridKernel::new(&params);

    for s in 0..steps {
        let step = s as u64;
        match spec {
            ProcessSpec::KunitaLandmark { convention, .. } => {
                let inc = sample_increment(backend, d, n, dt, stream, step);
                let flow = |pts: &[f64]| -> Result<Vec<f64>> {
                    match backend {
                        NoiseBackend::GridQuadrature(grid) => {
                            check_inside(grid, pts)?;
                            Ok(grid_displacement(grid, &grid_kernel, pts, &inc.values))
                        }
                        NoiseBackend::ExactCovariance => {
                            let cfg = LandmarkConfig::from_raw(pts.to_vec(), d);
                            let l = factor_psd(&crate::kernels::gram_g(&params, &cfg))?;
                            Ok(exact_displacement(&l, &inc.values, d))
                        }
                    }
                };
                let d1 = flow(&x)?;
                match convention {
                    Convention::Ito => add_assign(&mut x, &d1),
                    Convention::Stratonovich => {
                        let pred: Vec<f64> = x.iter().zip(&d1).map(|(a, b)| a + b).collect();
                        let d2 = flow(&pred)?;
                        for i in 0..x.len() {
                            x[i] += 0.5 * (d1[i] + d2[i]);
                        }
                    }
                }
            }
            ProcessSpec::RiemannianBM { .. } => {
                let inc = keyed_increment(n, d, dt, stream, step);
                let cfg = LandmarkConfig::from_raw(x.clone(), d);
                let s_mat = gram_k(&params, &cfg);
                let drift = brownian_drift(&params, &x, d, &s_mat)?;
                let l = factor_psd(&s_mat)?;
                let noise = exact_displacement(&l, &inc.values, d);
                for i in 0..x.len() {
                    x[i] += drift[i] * dt + noise[i];
                }
            }
            ProcessSpec::StochasticEPDiff { grid, .. } => {
                let inc = keyed_increment(grid.node_count(), d, dt, stream, step);
                let mom = p.as_mut().expect("momentum present");
                let (dx1, dp1) = epdiff_field(&params, grid, &grid_kernel, &x, mom, dt, &inc.values)?;
                let xp: Vec<f64> = x.iter().zip(&dx1).map(|(a, b)| a + b).collect();
                let pp: Vec<f64> = mom.iter().zip(&dp1).map(|(a, b)| a + b).collect();
                let (dx2, dp2) = epdiff_field(&params, grid, &grid_kernel, &xp, &pp, dt, &inc.values)?;
                for i in 0..x.len() {
                    x[i] += 0.5 * (dx1[i] + dx2[i]);
                    mom[i] += 0.5 * (dp1[i] + dp2[i]);
                }
            }
            ProcessSpec::InnerMomentumNoise { noise_scale, .. } => {
                let inc = keyed_increment(n, d, dt, stream, step);
                let mom = p.as_mut().expect("momentum present");
                euler_momentum_step(&params, &mut x, mom, d, dt, 0.0, *noise_scale, &inc.values);
            }
            ProcessSpec::Langevin { dissipation, noise_scale, .. } => {
                let inc = keyed_increment(n, d, dt, stream, step);
                let mom = p.as_mut().expect("momentum present");
                euler_momentum_step(&params, &mut x, mom, d, dt, *dissipation, *noise_scale, &inc.values);
            }
        }
        let t = (s + 1) as f64 * dt;
        if x.iter().chain(p.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { time: t });
        }
        if let Some((r, i, j)) = min_pairwise(&x, d) {
            if r < tol {
                path.collision = Some(Collision { time: t, i, j });
                return Ok(path);
            }
        }
        path.times.push(t);
        path.positions.push(x.clone());
        if let (Some(ms), Some(pv)) = (path.momenta.as_mut(), p.as_ref()) {
            ms.push(pv.clone());
        }
    }
    Ok(path)
}

fn add_assign(x: &mut [f64], dx: &[f64]) {
    for (a, b) in x.iter_mut().zip(dx) {
        *a += b;
    }
}

fn check_inside(grid: &NoiseGrid, pts: &[f64]) -> Result<()> {
    let d = grid.dim();
    let up = grid.upper();
    for (index, p) in pts.chunks(d).enumerate() {
        if p.iter().zip(&grid.lower).zip(&up).any(|((v, l), u)| !(*v >= *l && *v <= *u)) {
            return Err(Error::DomainCoverage { index, position: p.to_vec() });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn euler_momentum_step(
    params: &KernelParams,
    x: &mut [f64],
    p: &mut [f64],
    d: usize,
    dt: f64,
    dissipation: f64,
    noise_scale: f64,
    dw: &[f64],
) {
    let m = x.len();
    let mut vel = vec![0.0; m];
    let mut force = vec![0.0; m];
    hamiltonian_vector_field(params, x, p, d, &mut vel, &mut force);
    for i in 0..m {
        x[i] += vel[i] * dt;
        p[i] += (force[i] - dissipation * vel[i]) * dt + noise_scale * dw[i];
    }
}

/// One Stratonovich increment of stochastic EPDiff, `(dx, dp)`.
fn epdiff_field(
    params: &KernelParams,
    grid: &NoiseGrid,
    kernel: &GridKernel,
    x: &[f64],
    p: &[f64],
    dt: f64,
    noise: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inside(grid, x)?;
    let d = grid.dim();
    let m = x.len();
    let mut vel = vec![0.0; m];
    let mut force = vec![0.0; m];
    hamiltonian_vector_field(params, x, p, d, &mut vel, &mut force);
    let mut dx = grid_displacement(grid, kernel, x, noise);
    let w = grid.weight();
    let mut dp = vec![0.0; m];
    for i in 0..m / d {
        let pi = &p[i * d..(i + 1) * d];
        let xi = &x[i * d..(i + 1) * d];
        if pi.iter().all(|&v| v == 0.0) {
            continue;
        }
        // -Σ_j ∇k(|x_i - ζ_j|) (p_i · ΔW_j)
        let mut acc = [0.0f64; 3];
        grid.visit(kernel, xi, |j, off, k| {
            let r = off.iter().map(|o| o * o).sum::<f64>().sqrt();
            let gf = match params.family {
                KernelFamily::SquaredExponential => -k / (params.sigma * params.sigma),
                KernelFamily::Matern { .. } => params.grad_factor(r),
            };
            let pw: f64 = (0..d).map(|a| pi[a] * noise[j * d + a]).sum();
            for a in 0..d {
                acc[a] += gf * off[a] * pw;
            }
        });
        for a in 0..d {
            dp[i * d + a] = -w * acc[a];
        }
    }
    for i in 0..m {
        dx[i] += vel[i] * dt;
        dp[i] += force[i] * dt;
    }
    Ok((dx, dp))
}

fn check_smooth(params: &KernelParams) -> Result<()> {
    if let Some(nu) = params.nu() {
        if nu <= 1.0 {
            return Err(Error::InsufficientSmoothness(format!(
                "the cometric derivatives need order nu > 1, got {nu}"
            )));
        }
    }
    Ok(())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
fn spd_inverse(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    s.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Factorization("cometric matrix is not positive definite".into()))
}

/// Itô drift `-½ Σ_lm K^{lm} Γ^i_{lm}` of Brownian motion for the metric
/// `K(x)^{-1}`.
///
/// With `K = S ⊗ I_d` this contracts to
/// `½ Σ_l ∂_l K_{il} - ¼ Σ_k K_{ik} tr(K^{-1} ∂_k K)`.
fn brownian_drift(params: &KernelParams, x: &[f64], d: usize, s: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = x.len() / d;
    let s_inv = spd_inverse(s)?;
    let mut div = vec![0.0; n * d];
    let mut tr = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let xi = &x[i * d..(i + 1) * d];
            let xj = &x[j * d..(j + 1) * d];
            let gf = params.grad_factor(dist(xi, xj));
            for a in 0..d {
                let g = gf * (xi[a] - xj[a]);
                div[i * d + a] -= g;
                tr[i * d + a] += 2.0 * d as f64 * s_inv[(i, j)] * g;
            }
        }
    }
    let mut drift = vec![0.0; n * d];
    for i in 0..n {
        for a in 0..d {
            let kt: f64 = (0..n).map(|q| s[(i, q)] * tr[q * d + a]).sum();
            drift[i * d + a] = 0.5 * div[i * d + a] - 0.25 * kt;
        }
    }
    Ok(drift)
}

/// Christoffel symbols of the metric `K(x)^{-1}`, as a flat `m x m x m`
/// array indexed `[i][l][m]` with `m = n·d`: `Γ^i_{lm}`.
pub fn christoffel(params: &KernelParams, x: &LandmarkConfig) -> Result<Vec<f64>> {
    params.validate()?;
    check_smooth(params)?;
    let d = x.dim();
    let n = x.len();
    if params.dim != d {
        return Err(Error::DimensionMismatch("kernel and configuration dimensions differ".into()));
    }
    let m = n * d;
    let kmat = crate::kernels::expand_blocks(&gram_k(params, x), d);
    let g = spd_inverse(&kmat)?;
    // ∂_l g = -g (∂_l K) g
    let mut dg = Vec::with_capacity(m);
    for l in 0..m {
        let (q, b) = (l / d, l % d);
        let mut dk = DMatrix::zeros(m, m);
        for j in 0..n {
            if j == q {
                continue;
            }
            let v = params.grad_factor(x.distance(q, j)) * (x.point(q)[b] - x.point(j)[b]);
            for a in 0..d {
                dk[(q * d + a, j * d + a)] = v;
                dk[(j * d + a, q * d + a)] = v;
            }
        }
        dg.push(-(&g * dk * &g));
    }
    let mut gamma = vec![0.0; m * m * m];
    for l in 0..m {
        for mm in 0..m {
            // first-kind symbols Γ_{k,lm}
            let first: Vec<f64> = (0..m)
                .map(|k| 0.5 * (dg[l][(k, mm)] + dg[mm][(k, l)] - dg[k][(l, mm)]))
                .collect();
            for i in 0..m {
                gamma[(i * m + l) * m + mm] = (0..m).map(|k| kmat[(i, k)] * first[k]).sum();
            }
        }
    }
    Ok(gamma)
}

/// Advects every point of a dense point set (e.g. a polyline) by one shared
/// realization of the grid-quadrature Kunita flow, Euler-Maruyama.
///
/// Repeated points are allowed. The trajectory of any point depends only on
/// its own start and the grid noise, so subsets reproduce bit-for-bit.
pub fn warp_points(
    params: &KernelParams,
    points: &LandmarkConfig,
    duration: f64,
    steps: usize,
    grid: &NoiseGrid,
    stream: &NoiseStream,
) -> Result<PathSample> {
    params.validate()?;
    let dt = check_time(duration, steps)?;
    let d = points.dim();
    if params.dim != d || grid.dim() != d {
        return Err(Error::DimensionMismatch("kernel, grid and point dimensions differ".into()));
    }
    let kernel = GridKernel::new(params);
    let mut x = points.coords().to_vec();
    let mut path = PathSample {
        dim: d,
        times: vec![0.0],
        positions: vec![x.clone()],
        momenta: None,
        meta: PathMeta {
            process: "kunita_warp".into(),
            convention: Convention::Ito.name().into(),
            backend: "grid_quadrature".into(),
            seed: stream.seed,
            stream: stream.stream,
            dt,
        },
        collision: None,
    };
    for s in 0..steps {
        check_inside(grid, &x)?;
        let inc = keyed_increment(grid.node_count(), d, dt, stream, s as u64);
        let dx = grid_displacement(grid, &kernel, &x, &inc.values);
        add_assign(&mut x, &dx);
        path.times.push((s + 1) as f64 * dt);
        path.positions.push(x.clone());
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::kernel_matrix_k;
    use crate::landmarks::geodesic;
    use crate::noise::DEFAULT_PADDING;
    use testkit::SplitMix;

    fn se(alpha: f64, sigma: f64, d: usize) -> KernelParams {
        KernelParams::squared_exponential(alpha, sigma, d).unwrap()
    }

    fn random_config(seed: u64, n: usize, d: usize, spread: f64) -> LandmarkConfig {
        let mut rng = SplitMix(seed);
        LandmarkConfig::new((0..n * d).map(|_| rng.range(-spread, spread)).collect(), d).unwrap()
    }

    #[test]
    fn zero_amplitude_kunita_is_constant() {
        let p = se(0.0, 1.0, 2);
        let x0 = random_config(1, 4, 2, 1.0);
        let spec = ProcessSpec::KunitaLandmark { params: p, convention: Convention::Ito };
        let grid = NoiseBackend::GridQuadrature(NoiseGrid::covering(&p, &x0, DEFAULT_PADDING, None).unwrap());
        for backend in [NoiseBackend::ExactCovariance, grid] {
            let path = simulate(&spec, &x0, None, 1.0, 20, &backend, &NoiseStream::new(1, 0)).unwrap();
            for s in &path.positions {
                assert_eq!(s.as_slice(), x0.coords());
            }
        }
    }

    #[test]
    fn momentum_variants_need_momentum() {
        let p = se(1.0, 1.0, 2);
        let x0 = random_config(2, 3, 2, 1.0);
        let spec = ProcessSpec::Langevin { params: p, dissipation: 0.0, noise_scale: 0.0 };
        let r = simulate(&spec, &x0, None, 1.0, 10, &NoiseBackend::ExactCovariance, &NoiseStream::new(0, 0));
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
        let kun = ProcessSpec::KunitaLandmark { params: p, convention: Convention::Ito };
        assert!(simulate(&kun, &x0, None, 1.0, 0, &NoiseBackend::ExactCovariance, &NoiseStream::new(0, 0)).is_err());
    }

    #[test]
    fn noiseless_langevin_follows_the_geodesic() {
        let p = se(1.0, 1.0, 2);
        let x0 = random_config(3, 4, 2, 1.0);
        let mut rng = SplitMix(4);
        let p0 = Momentum::new((0..8).map(|_| 0.5 * rng.normal()).collect(), 2).unwrap();
        let spec = ProcessSpec::Langevin { params: p, dissipation: 0.0, noise_scale: 0.0 };
        let path = simulate(&spec, &x0, Some(&p0), 1.0, 10_000, &NoiseBackend::ExactCovariance, &NoiseStream::new(0, 0))
            .unwrap();
        let geo = geodesic(&p, &x0, &p0, 1.0, 100).unwrap();
        let (xg, pg) = geo.last();
        for (a, b) in path.final_position().iter().zip(xg.coords()) {
            assert!((a - b).abs() < 1e-3);
        }
        for (a, b) in path.momenta.as_ref().unwrap().last().unwrap().iter().zip(pg.coords()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn dissipation_removes_energy() {
        let p = se(1.0, 1.0, 2);
        let x0 = random_config(5, 3, 2, 1.0);
        let p0 = Momentum::new(vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5], 2).unwrap();
        let spec = ProcessSpec::Langevin { params: p, dissipation: 2.0, noise_scale: 0.0 };
        let path = simulate(&spec, &x0, Some(&p0), 1.0, 1000, &NoiseBackend::ExactCovariance, &NoiseStream::new(0, 0))
            .unwrap();
        let h = |k: usize| {
            let xs = LandmarkConfig::from_raw(path.positions[k].clone(), 2);
            let ps = Momentum::from_raw(path.momenta.as_ref().unwrap()[k].clone(), 2);
            crate::landmarks::hamiltonian(&p, &xs, &ps).unwrap()
        };
        assert!(h(1000) < 0.5 * h(0));
    }

    #[test]
    fn inner_momentum_noise_perturbs_only_momentum_directly() {
        let p = se(1.0, 1.0, 1);
        let x0 = LandmarkConfig::new(vec![0.0], 1).unwrap();
        let p0 = Momentum::zeros(1, 1);
        let spec = ProcessSpec::InnerMomentumNoise { params: p, noise_scale: 0.3 };
        let stream = NoiseStream::new(8, 0);
        let path = simulate(&spec, &x0, Some(&p0), 0.1, 1, &NoiseBackend::ExactCovariance, &stream).unwrap();
        // first Euler step: position uses the old momentum, which is zero
        assert_eq!(path.positions[1][0], 0.0);
        let dw = 0.1f64.sqrt() * stream.normal(0, 0, 0);
        assert_eq!(path.momenta.as_ref().unwrap()[1][0], 0.3 * dw);
    }

    #[test]
    fn epdiff_with_zero_momentum_is_the_stratonovich_flow() {
        let p = KernelParams::matern(0.3, 0.5, 3.5, 2).unwrap();
        let x0 = random_config(6, 5, 2, 1.0);
        let grid = NoiseGrid::covering(&p, &x0, DEFAULT_PADDING, None).unwrap();
        let stream = NoiseStream::new(21, 4);
        let epd = ProcessSpec::StochasticEPDiff { params: p, grid: grid.clone() };
        let a = simulate(&epd, &x0, Some(&Momentum::zeros(5, 2)), 1.0, 50, &NoiseBackend::ExactCovariance, &stream)
            .unwrap();
        let kun = ProcessSpec::KunitaLandmark { params: p, convention: Convention::Stratonovich };
        let b = simulate(&kun, &x0, None, 1.0, 50, &NoiseBackend::GridQuadrature(grid), &stream).unwrap();
        for (u, v) in a.positions.iter().zip(&b.positions) {
            for (s, t) in u.iter().zip(v) {
                assert_eq!(s.to_bits(), t.to_bits());
            }
        }
    }

    #[test]
    fn epdiff_momentum_noise_matches_finite_differences() {
        // the momentum noise term is -∇_x <p, Σ_j σ_j(x) ΔW_j>
        let p = KernelParams::matern(0.7, 0.6, 3.5, 2).unwrap();
        let x0 = random_config(7, 2, 2, 0.5);
        let grid = NoiseGrid::covering(&p, &x0, DEFAULT_PADDING, None).unwrap();
        let kernel = GridKernel::new(&p);
        let inc = keyed_increment(grid.node_count(), 2, 0.01, &NoiseStream::new(1, 1), 0);
        let mom = vec![0.4, -0.3, 0.2, 0.9];
        let (_, dp) = epdiff_field(&p, &grid, &kernel, x0.coords(), &mom, 0.0, &inc.values).unwrap();
        let pairing = |x: &[f64]| -> f64 {
            let dx = grid_displacement(&grid, &kernel, x, &inc.values);
            dx.iter().zip(&mom).map(|(a, b)| a * b).sum()
        };
        for i in 0..4 {
            let mut xp = x0.coords().to_vec();
            let mut xm = x0.coords().to_vec();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (pairing(&xp) - pairing(&xm)) / 2e-6;
            assert!((dp[i] + fd).abs() < 1e-7 * (1.0 + fd.abs()), "{i}: {} vs {}", dp[i], -fd);
        }
    }

    #[test]
    fn christoffel_single_landmark_vanishes() {
        let p = se(1.0, 1.0, 2);
        let x = LandmarkConfig::new(vec![0.3, 0.4], 2).unwrap();
        assert!(christoffel(&p, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn christoffel_matches_metric_finite_differences() {
        let p = se(1.0, 1.0, 1);
        let x = LandmarkConfig::new(vec![0.0, 1.0], 1).unwrap();
        let gamma = christoffel(&p, &x).unwrap();
        let metric = |c: &[f64]| {
            let k = kernel_matrix_k(&p, &LandmarkConfig::new(c.to_vec(), 1).unwrap()).unwrap();
            k.try_inverse().unwrap()
        };
        let h = 1e-5;
        let dmetric = |l: usize| {
            let mut a = x.coords().to_vec();
            let mut b = x.coords().to_vec();
            a[l] += h;
            b[l] -= h;
            (metric(&a) - metric(&b)) / (2.0 * h)
        };
        let dg: Vec<DMatrix<f64>> = (0..2).map(dmetric).collect();
        let kinv = kernel_matrix_k(&p, &x).unwrap();
        for i in 0..2 {
            for l in 0..2 {
                for m in 0..2 {
                    let want: f64 = (0..2)
                        .map(|k| 0.5 * kinv[(i, k)] * (dg[l][(k, m)] + dg[m][(k, l)] - dg[k][(l, m)]))
                        .sum();
                    let got = gamma[(i * 2 + l) * 2 + m];
                    assert!((got - want).abs() < 1e-5, "{i}{l}{m}: {got} vs {want}");
                    assert_eq!(got, gamma[(i * 2 + m) * 2 + l]);
                }
            }
        }
    }

    #[test]
    fn brownian_drift_is_the_contracted_christoffel() {
        for (seed, params) in [
            (8, se(0.8, 0.9, 2)),
            (9, KernelParams::matern(1.1, 0.7, 3.5, 2).unwrap()),
            (10, KernelParams::matern(1.0, 1.0, 3.0, 3).unwrap()),
        ] {
            let d = params.dim;
            let x = random_config(seed, 3, d, 1.0);
            let m = 3 * d;
            let gamma = christoffel(&params, &x).unwrap();
            let kmat = kernel_matrix_k(&params, &x).unwrap();
            let drift = brownian_drift(&params, x.coords(), d, &gram_k(&params, &x)).unwrap();
            for i in 0..m {
                let want: f64 = -0.5
                    * (0..m)
                        .flat_map(|l| (0..m).map(move |mm| (l, mm)))
                        .map(|(l, mm)| kmat[(l, mm)] * gamma[(i * m + l) * m + mm])
                        .sum::<f64>();
                assert!((drift[i] - want).abs() < 1e-10 * (1.0 + want.abs()), "{i}: {} vs {want}", drift[i]);
            }
        }
    }

    #[test]
    fn rough_matern_is_rejected_for_brownian_motion() {
        let p = KernelParams::matern(1.0, 1.0, 1.75, 2).unwrap(); // nu = 0.75
        let x = LandmarkConfig::new(vec![0.0, 0.0, 1.0, 0.0], 2).unwrap();
        assert!(matches!(christoffel(&p, &x), Err(Error::InsufficientSmoothness(_))));
        let spec = ProcessSpec::RiemannianBM { params: p };
        let r = simulate(&spec, &x, None, 1.0, 5, &NoiseBackend::ExactCovariance, &NoiseStream::new(0, 0));
        assert!(matches!(r, Err(Error::InsufficientSmoothness(_))));
    }

    #[test]
    fn single_landmark_brownian_motion_increments() {
        let p = se(2.0, 1.0, 2);
        let x0 = LandmarkConfig::new(vec![0.0, 0.0], 2).unwrap();
        let spec = ProcessSpec::RiemannianBM { params: p };
        let dt = 0.01;
        let n = 10_000u64;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for seed in 0..n {
            let path = simulate(&spec, &x0, None, dt, 1, &NoiseBackend::ExactCovariance, &NoiseStream::new(seed, 0))
                .unwrap();
            xs.push(path.positions[1][0]);
            ys.push(path.positions[1][1]);
        }
        let want = 2.0 * dt;
        let se = want * (2.0 / n as f64).sqrt();
        for v in [&xs, &ys] {
            let (m, var) = testkit::mean_var(v);
            assert!(m.abs() < 4.0 * (want / n as f64).sqrt());
            assert!((var - want).abs() < 4.0 * se);
        }
    }

    #[test]
    fn warp_subset_and_closure() {
        let p = se(0.5, 0.5, 2);
        let n = 40;
        let mut pts = Vec::new();
        for i in 0..=n {
            let t = 2.0 * std::f64::consts::PI * (i % n) as f64 / n as f64;
            pts.extend([t.cos(), 0.6 * t.sin()]);
        }
        let poly = LandmarkConfig::point_set(pts, 2).unwrap();
        let grid = NoiseGrid::covering(&p, &poly, DEFAULT_PADDING, None).unwrap();
        let stream = NoiseStream::new(3, 0);
        let full = warp_points(&p, &poly, 1.0, 50, &grid, &stream).unwrap();
        let idx: Vec<usize> = (0..=n).step_by(4).collect();
        let sub = warp_points(&p, &poly.select(&idx), 1.0, 50, &grid, &stream).unwrap();
        for (fs, ss) in full.positions.iter().zip(&sub.positions) {
            for (k, &i) in idx.iter().enumerate() {
                assert_eq!(&fs[2 * i..2 * i + 2], &ss[2 * k..2 * k + 2]);
            }
            assert_eq!(&fs[0..2], &fs[2 * n..2 * n + 2]);
        }
        let still = warp_points(&p, &poly, 1.0, 5, &grid, &NoiseStream::new(3, 0));
        assert!(still.is_ok());
        let zero = warp_points(&se(0.0, 0.5, 2), &poly, 1.0, 5, &grid, &stream).unwrap();
        assert!(zero.positions.iter().all(|s| s.as_slice() == poly.coords()));
    }

    #[test]
    fn collision_halts_with_flag() {
        // with a tiny length scale the two landmarks do not interact and one
        // Euler step lands both on 0.5
        let p = se(1.0, 1e-6, 1);
        let x0 = LandmarkConfig::new(vec![0.0, 1.0], 1).unwrap();
        let p0 = Momentum::new(vec![0.5, -0.5], 1).unwrap();
        let spec = ProcessSpec::Langevin { params: p, dissipation: 0.0, noise_scale: 0.0 };
        let path = simulate(&spec, &x0, Some(&p0), 3.0, 3, &NoiseBackend::ExactCovariance, &NoiseStream::new(0, 0))
            .unwrap();
        let c = path.collision.expect("landmarks meet after the first step");
        assert_eq!((c.i, c.j, c.time), (0, 1, 1.0));
        assert_eq!(path.times, vec![0.0]);
        assert_eq!(path.positions.len(), 1);
    }
}
