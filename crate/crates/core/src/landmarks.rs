//! Landmark configurations, the cometric Hamiltonian and deterministic
//! geodesic shooting.
//!
//! Coordinates are stored landmark-major: landmark `i`, axis `a` lives at
//! index `i * d + a`.

use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use nalgebra::DMatrix;

/// Collision threshold relative to the kernel length scale.
pub const COLLISION_TOLERANCE: f64 = 1e-8;

/// `n` points in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkConfig {
    coords: Vec<f64>,
    dim: usize,
}

impl LandmarkConfig {
    /// A configuration of pairwise distinct landmarks.
    pub fn new(coords: Vec<f64>, dim: usize) -> Result<Self> {
        let x = Self::point_set(coords, dim)?;
        if let Some((dist, i, j)) = x.min_distance() {
            if dist <= 0.0 {
                return Err(Error::InvalidConfig(format!("landmarks {i} and {j} coincide")));
            }
        }
        Ok(x)
    }

    /// A set of points that may contain repeated entries, e.g. a closed
    /// polyline whose last vertex repeats the first. Only finiteness is
    /// checked.
    pub fn point_set(coords: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || coords.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite coordinate at index {pos}")));
        }
        Ok(Self { coords, dim })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch("points of unequal dimension".into()));
        }
        Self::new(points.concat(), dim.max(1))
    }

    pub(crate) fn from_raw(coords: Vec<f64>, dim: usize) -> Self {
        debug_assert_eq!(coords.len() % dim, 0);
        Self { coords, dim }
    }

    /// Number of landmarks.
    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks(self.dim)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        dist(self.point(i), self.point(j))
    }

    /// Smallest pairwise distance and the pair attaining it.
    pub fn min_distance(&self) -> Option<(f64, usize, usize)> {
        min_pairwise(&self.coords, self.dim)
    }

    /// First `k` landmarks.
    pub fn prefix(&self, k: usize) -> Self {
        Self { coords: self.coords[..k * self.dim].to_vec(), dim: self.dim }
    }

    /// Landmarks at the given indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        let coords = idx.iter().flat_map(|&i| self.point(i).iter().copied()).collect();
        Self { coords, dim: self.dim }
    }

    /// `n x d` matrix view, one landmark per row.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.coords)
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let mut coords = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            coords.extend(m.row(i).iter());
        }
        Self::point_set(coords, m.ncols())
    }

    /// Axis-aligned bounding box `(lower, upper)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in self.points() {
            for a in 0..self.dim {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// Cotangent vectors at a landmark configuration, same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum {
    coords: Vec<f64>,
    dim: usize,
}

impl Momentum {
    pub fn new(coords: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || coords.len() % dim != 0 {
            return Err(Error::DimensionMismatch("momentum length not a multiple of d".into()));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite momentum".into()));
        }
        Ok(Self { coords, dim })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self { coords: vec![0.0; n * dim], dim }
    }

    pub(crate) fn from_raw(coords: Vec<f64>, dim: usize) -> Self {
        Self { coords, dim }
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Deterministic geodesic sampled on a time grid.
#[derive(Clone, Debug)]
pub struct GeodesicPath {
    pub times: Vec<f64>,
    pub states: Vec<(LandmarkConfig, Momentum)>,
}

impl GeodesicPath {
    pub fn last(&self) -> &(LandmarkConfig, Momentum) {
        self.states.last().expect("geodesic has at least the initial state")
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

pub(crate) fn min_pairwise(coords: &[f64], d: usize) -> Option<(f64, usize, usize)> {
    let n = coords.len() / d;
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let r = dist(&coords[i * d..(i + 1) * d], &coords[j * d..(j + 1) * d]);
            if best.map_or(true, |b| r < b.0) {
                best = Some((r, i, j));
            }
        }
    }
    best
}

fn check_shapes(params: &KernelParams, x: &LandmarkConfig, p: &Momentum) -> Result<()> {
    if x.dim() != p.dim() || x.len() != p.len() {
        return Err(Error::DimensionMismatch(format!(
            "configuration {}x{} vs momentum {}x{}",
            x.len(),
            x.dim(),
            p.len(),
            p.dim()
        )));
    }
    if params.dim != x.dim() {
        return Err(Error::DimensionMismatch(format!(
            "kernel dimension {} vs configuration dimension {}",
            params.dim,
            x.dim()
        )));
    }
    Ok(())
}

/// `H(x, p) = ½ Σ_ij k(|x_i - x_j|) p_i·p_j`.
pub fn hamiltonian(params: &KernelParams, x: &LandmarkConfig, p: &Momentum) -> Result<f64> {
    check_shapes(params, x, p)?;
    Ok(hamiltonian_raw(params, x.coords(), p.coords(), x.dim()))
}

pub(crate) fn hamiltonian_raw(params: &KernelParams, x: &[f64], p: &[f64], d: usize) -> f64 {
    let n = x.len() / d;
    let mut h = 0.0;
    for i in 0..n {
        let pi = &p[i * d..(i + 1) * d];
        h += 0.5 * params.k(0.0) * dot(pi, pi);
        for j in (i + 1)..n {
            let pj = &p[j * d..(j + 1) * d];
            let r = dist(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            h += params.k(r) * dot(pi, pj);
        }
    }
    h
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// `∂H/∂p` and `-∂H/∂x`, written into `vel` and `force`.
pub(crate) fn hamiltonian_vector_field(
    params: &KernelParams,
    x: &[f64],
    p: &[f64],
    d: usize,
    vel: &mut [f64],
    force: &mut [f64],
) {
    let n = x.len() / d;
    let k0 = params.k(0.0);
    for (v, q) in vel.iter_mut().zip(p) {
        *v = k0 * q;
    }
    force.iter_mut().for_each(|f| *f = 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let xi = &x[i * d..(i + 1) * d];
            let xj = &x[j * d..(j + 1) * d];
            let r = dist(xi, xj);
            let k = params.k(r);
            let pij = dot(&p[i * d..(i + 1) * d], &p[j * d..(j + 1) * d]);
            let gf = if pij != 0.0 { params.grad_factor(r) * pij } else { 0.0 };
            for a in 0..d {
                vel[i * d + a] += k * p[j * d + a];
                vel[j * d + a] += k * p[i * d + a];
                let diff = xi[a] - xj[a];
                force[i * d + a] -= gf * diff;
                force[j * d + a] += gf * diff;
            }
        }
    }
}

/// Geodesic from `(x0, p0)` over `[0, duration]`, classical RK4 with `steps`
/// fixed steps.
pub fn geodesic(
    params: &KernelParams,
    x0: &LandmarkConfig,
    p0: &Momentum,
    duration: f64,
    steps: usize,
) -> Result<GeodesicPath> {
    check_shapes(params, x0, p0)?;
    params.validate()?;
    if steps == 0 {
        return Err(Error::InvalidTime("steps must be >= 1".into()));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::InvalidTime(format!("duration must be > 0, got {duration}")));
    }
    let d = x0.dim();
    let m = x0.coords().len();
    let dt = duration / steps as f64;
    let tol = COLLISION_TOLERANCE * params.sigma;

    let mut x = x0.coords().to_vec();
    let mut p = p0.coords().to_vec();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push((x0.clone(), p0.clone()));

    let mut kx = vec![vec![0.0; m]; 4];
    let mut kp = vec![vec![0.0; m]; 4];
    let mut xs = vec![0.0; m];
    let mut ps = vec![0.0; m];
    for step in 1..=steps {
        hamiltonian_vector_field(params, &x, &p, d, &mut kx[0], &mut kp[0]);
        for (stage, coef) in [(1, 0.5), (2, 0.5), (3, 1.0)] {
            for i in 0..m {
                xs[i] = x[i] + coef * dt * kx[stage - 1][i];
                ps[i] = p[i] + coef * dt * kp[stage - 1][i];
            }
            let (_, tail) = kx.split_at_mut(stage);
            let (_, tp) = kp.split_at_mut(stage);
            hamiltonian_vector_field(params, &xs, &ps, d, &mut tail[0], &mut tp[0]);
        }
        for i in 0..m {
            x[i] += dt / 6.0 * (kx[0][i] + 2.0 * kx[1][i] + 2.0 * kx[2][i] + kx[3][i]);
            p[i] += dt / 6.0 * (kp[0][i] + 2.0 * kp[1][i] + 2.0 * kp[2][i] + kp[3][i]);
        }
        let t = step as f64 * dt;
        if x.iter().chain(&p).any(|v| !v.is_finite()) {
            return Err(Error::GeodesicBreakdown { time: t, i: 0, j: 0 });
        }
        if let Some((r, i, j)) = min_pairwise(&x, d) {
            if r < tol {
                return Err(Error::GeodesicBreakdown { time: t, i, j });
            }
        }
        times.push(t);
        states.push((LandmarkConfig::from_raw(x.clone(), d), Momentum::from_raw(p.clone(), d)));
    }
    Ok(GeodesicPath { times, states })
}

fn check_rotation(r: &DMatrix<f64>, d: usize) -> Result<()> {
    if r.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!("rotation must be {d}x{d}")));
    }
    let ortho = (r.transpose() * r - DMatrix::<f64>::identity(d, d)).amax();
    if ortho > 1e-10 || (r.determinant() - 1.0).abs() > 1e-10 {
        return Err(Error::ParameterDomain("matrix is not a proper rotation".into()));
    }
    Ok(())
}

/// Maps every landmark `x_i` to `R x_i + t`.
pub fn rigid_transform(x: &LandmarkConfig, rotation: &DMatrix<f64>, translation: &[f64]) -> Result<LandmarkConfig> {
    let d = x.dim();
    check_rotation(rotation, d)?;
    if translation.len() != d {
        return Err(Error::DimensionMismatch(format!("translation must have length {d}")));
    }
    let mut out = Vec::with_capacity(x.coords().len());
    for p in x.points() {
        for a in 0..d {
            let mut v = translation[a];
            for b in 0..d {
                v += rotation[(a, b)] * p[b];
            }
            out.push(v);
        }
    }
    Ok(LandmarkConfig { coords: out, dim: d })
}

/// Rotates each momentum covector, `p_i -> R p_i`.
pub fn rotate_momentum(p: &Momentum, rotation: &DMatrix<f64>) -> Result<Momentum> {
    let d = p.dim();
    check_rotation(rotation, d)?;
    let mut out = Vec::with_capacity(p.coords().len());
    for q in p.coords().chunks(d) {
        for a in 0..d {
            out.push((0..d).map(|b| rotation[(a, b)] * q[b]).sum());
        }
    }
    Ok(Momentum { coords: out, dim: d })
}

/// Rotation matrix in 2-D.
pub fn rotation_2d(angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}
