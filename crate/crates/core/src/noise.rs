//! Discretized cylindrical Wiener drivers.
//!
//! Two backends turn one noise realization into landmark displacements:
//!
//! * `GridQuadrature` places independent Wiener increments on a regular
//!   lattice of nodes and convolves them with the kernel,
//!   `dx(x) = Σ_j k(|x - ζ_j|) h^{d/2} ΔW_j`. The increment of a node is a
//!   pure function of `(seed, stream, step, node, axis)`, so any set of points
//!   is moved by the same field and the displacement of a point does not
//!   depend on which other points are driven alongside it.
//! * `ExactCovariance` draws one increment per landmark degree of freedom and
//!   multiplies by a Cholesky factor of the `g` Gram matrix. It is tied to
//!   the configuration it was drawn for.
//!
//! The quadrature covariance is `g_h(x, y) = h^d Σ_j k(|x - ζ_j|) k(|y - ζ_j|)`,
//! a Riemann sum for `g(|x - y|)`.

use crate::error::{Error, Result};
use crate::kernels::{factor_psd, gram_g, KernelFamily, KernelParams};
use crate::landmarks::LandmarkConfig;
use crate::rng::NoiseStream;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Default padding around driven points, in kernel length scales.
pub const DEFAULT_PADDING: f64 = 5.0;

/// Kernel values below this fraction of `alpha` are dropped from the
/// quadrature sum. They are far below double-precision roundoff.
const NEGLIGIBLE: f64 = 1e-18;

/// Regular lattice of noise nodes over an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseGrid {
    /// Lower corner; node `(i_0, .., i_{d-1})` sits at `lower + h * i`.
    pub lower: Vec<f64>,
    /// Nodes per axis.
    pub counts: Vec<usize>,
    pub spacing: f64,
}

impl NoiseGrid {
    pub fn new(lower: Vec<f64>, counts: Vec<usize>, spacing: f64) -> Result<Self> {
        if lower.is_empty() || lower.len() > 3 || lower.len() != counts.len() {
            return Err(Error::DimensionMismatch("grid corner and counts must share dimension 1..=3".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::ParameterDomain(format!("grid spacing must be > 0, got {spacing}")));
        }
        if lower.iter().any(|v| !v.is_finite()) || counts.iter().any(|&c| c == 0) {
            return Err(Error::ParameterDomain("grid corner must be finite and counts positive".into()));
        }
        Ok(Self { lower, counts, spacing })
    }

    /// Grid over the bounding box of `x` padded by `padding * sigma` on every
    /// side, with spacing `spacing` (default `sigma / 2`).
    pub fn covering(params: &KernelParams, x: &LandmarkConfig, padding: f64, spacing: Option<f64>) -> Result<Self> {
        params.validate()?;
        if params.dim != x.dim() {
            return Err(Error::DimensionMismatch("kernel and configuration dimensions differ".into()));
        }
        if x.is_empty() {
            return Err(Error::InvalidConfig("cannot size a grid for an empty point set".into()));
        }
        let h = spacing.unwrap_or(0.5 * params.sigma);
        let pad = padding * params.sigma;
        let (lo, hi) = x.bounding_box();
        let lower: Vec<f64> = lo.iter().map(|v| v - pad).collect();
        let counts = lo
            .iter()
            .zip(&hi)
            .map(|(l, u)| ((u - l + 2.0 * pad) / h).ceil() as usize + 1)
            .collect();
        Self::new(lower, counts, h)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.counts)
            .map(|(l, &c)| l + self.spacing * (c - 1) as f64)
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.counts.iter().product()
    }

    /// Position of node `j` (axis 0 varies slowest).
    pub fn node(&self, j: usize) -> Vec<f64> {
        let d = self.dim();
        let mut idx = vec![0usize; d];
        let mut rem = j;
        for a in (0..d).rev() {
            idx[a] = rem % self.counts[a];
            rem /= self.counts[a];
        }
        idx.iter().enumerate().map(|(a, &i)| self.coord(a, i)).collect()
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        self.lower[axis] + self.spacing * i as f64
    }

    /// Quadrature weight `h^{d/2}` applied to each node increment.
    pub fn weight(&self) -> f64 {
        self.spacing.powf(0.5 * self.dim() as f64)
    }

    fn contains(&self, p: &[f64]) -> bool {
        let up = self.upper();
        p.iter().zip(&self.lower).zip(&up).all(|((v, l), u)| *v >= *l && *v <= *u)
    }

    fn check_points(&self, points: &LandmarkConfig) -> Result<()> {
        if points.dim() != self.dim() {
            return Err(Error::DimensionMismatch("grid and point dimensions differ".into()));
        }
        for (index, p) in points.points().enumerate() {
            if !self.contains(p) {
                return Err(Error::DomainCoverage { index, position: p.to_vec() });
            }
        }
        Ok(())
    }

    /// Calls `f(node, x - ζ, k(|x - ζ|))` for every node with a
    /// non-negligible kernel value at `x`.
    pub(crate) fn visit<F: FnMut(usize, &[f64], f64)>(&self, kernel: &GridKernel, x: &[f64], mut f: F) {
        let d = self.dim();
        let h = self.spacing;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..d {
            let first = ((x[a] - kernel.cutoff - self.lower[a]) / h).ceil().max(0.0);
            let last = ((x[a] + kernel.cutoff - self.lower[a]) / h).floor().min((self.counts[a] - 1) as f64);
            if last < first {
                return;
            }
            lo[a] = first as usize;
            hi[a] = last as usize;
        }
        let mut strides = [1usize; 3];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.counts[a + 1];
        }
        // per-axis offsets and, for the separable family, per-axis factors
        let mut offs: [Vec<f64>; 3] = Default::default();
        let mut facs: [Vec<f64>; 3] = Default::default();
        for a in 0..d {
            offs[a] = (lo[a]..=hi[a]).map(|i| x[a] - self.coord(a, i)).collect();
            if kernel.separable {
                let s = kernel.inv_two_sigma2;
                facs[a] = offs[a].iter().map(|o| (-o * o * s).exp()).collect();
            }
        }
        let mut off = [0.0f64; 3];
        let mut idx = [0usize; 3];
        loop {
            let mut node = 0;
            let mut r2 = 0.0;
            for a in 0..d {
                let o = offs[a][idx[a]];
                off[a] = o;
                r2 += o * o;
                node += (lo[a] + idx[a]) * strides[a];
            }
            if r2 <= kernel.cutoff2 {
                let k = if kernel.separable {
                    let mut v = kernel.params.alpha;
                    for a in 0..d {
                        v *= facs[a][idx[a]];
                    }
                    v
                } else {
                    kernel.params.k(r2.sqrt())
                };
                f(node, &off[..d], k);
            }
            // odometer over the sub-box, last axis fastest
            let mut a = d;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] <= hi[a] - lo[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
    }

    /// Quadrature covariance `g_h(|x_i - x_j|)` as an `n x n` Gram matrix.
    pub fn quadrature_gram(&self, params: &KernelParams, x: &LandmarkConfig) -> Result<DMatrix<f64>> {
        params.validate()?;
        self.check_points(x)?;
        let kernel = GridKernel::new(params);
        let n = x.len();
        let rows: Vec<Vec<(usize, f64)>> = x
            .points()
            .map(|p| {
                let mut row = Vec::new();
                self.visit(&kernel, p, |j, _, k| row.push((j, k)));
                row
            })
            .collect();
        let hd = self.spacing.powi(self.dim() as i32);
        let mut m = DMatrix::zeros(n, n);
        let mut dense = vec![0.0; self.node_count()];
        for i in 0..n {
            for &(j, k) in &rows[i] {
                dense[j] = k;
            }
            for l in i..n {
                let v = hd * rows[l].iter().map(|&(j, k)| dense[j] * k).sum::<f64>();
                m[(i, l)] = v;
                m[(l, i)] = v;
            }
            for &(j, _) in &rows[i] {
                dense[j] = 0.0;
            }
        }
        Ok(m)
    }
}

/// Kernel data hoisted out of the quadrature loop.
pub(crate) struct GridKernel {
    pub params: KernelParams,
    cutoff: f64,
    cutoff2: f64,
    separable: bool,
    inv_two_sigma2: f64,
}

impl GridKernel {
    pub fn new(params: &KernelParams) -> Self {
        let cutoff = negligible_radius(params);
        Self {
            params: *params,
            cutoff,
            cutoff2: cutoff * cutoff,
            separable: matches!(params.family, KernelFamily::SquaredExponential),
            inv_two_sigma2: 0.5 / (params.sigma * params.sigma),
        }
    }
}

/// Radius beyond which `k(r) < NEGLIGIBLE * alpha`.
fn negligible_radius(params: &KernelParams) -> f64 {
    if params.alpha == 0.0 {
        return 0.0;
    }
    let target = NEGLIGIBLE * params.alpha;
    let mut hi = params.sigma;
    while params.k(hi) > target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if params.k(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Source of noise for landmark displacements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum NoiseBackend {
    GridQuadrature(NoiseGrid),
    /// Cholesky factor of the `g` Gram matrix at the current configuration.
    /// The kernel is supplied at drive time.
    ExactCovariance,
}

impl NoiseBackend {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseBackend::GridQuadrature(_) => "grid_quadrature",
            NoiseBackend::ExactCovariance => "exact_covariance",
        }
    }
}

/// One time step of Wiener increments, already scaled by `sqrt(dt)`.
///
/// Values are laid out unit-major (node or landmark), axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrement {
    pub dt: f64,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl NoiseIncrement {
    pub fn zeros(units: usize, dim: usize, dt: f64) -> Self {
        Self { dt, dim, values: vec![0.0; units * dim] }
    }

    /// Number of nodes or landmarks.
    pub fn units(&self) -> usize {
        self.values.len() / self.dim
    }
}

/// Increments for time step `step`.
///
/// For the grid backend there is one `N(0, dt)` draw per node and axis; for
/// the exact backend one per landmark (`landmarks` of them) and axis.
pub fn sample_increment(
    backend: &NoiseBackend,
    dim: usize,
    landmarks: usize,
    dt: f64,
    stream: &NoiseStream,
    step: u64,
) -> NoiseIncrement {
    let units = match backend {
        NoiseBackend::GridQuadrature(g) => g.node_count(),
        NoiseBackend::ExactCovariance => landmarks,
    };
    keyed_increment(units, dim, dt, stream, step)
}

pub(crate) fn keyed_increment(units: usize, dim: usize, dt: f64, stream: &NoiseStream, step: u64) -> NoiseIncrement {
    if dt == 0.0 {
        return NoiseIncrement::zeros(units, dim, dt);
    }
    let s = dt.sqrt();
    let mut values = Vec::with_capacity(units * dim);
    for j in 0..units {
        for a in 0..dim {
            values.push(s * stream.normal(step, j as u64, a as u64));
        }
    }
    NoiseIncrement { dt, dim, values }
}

/// Landmark displacement `n·d` produced by one increment.
pub fn drive(
    backend: &NoiseBackend,
    params: &KernelParams,
    points: &LandmarkConfig,
    inc: &NoiseIncrement,
) -> Result<Vec<f64>> {
    params.validate()?;
    if params.dim != points.dim() || inc.dim != points.dim() {
        return Err(Error::DimensionMismatch("kernel, points and increment dimensions differ".into()));
    }
    match backend {
        NoiseBackend::GridQuadrature(grid) => {
            if inc.units() != grid.node_count() {
                return Err(Error::DimensionMismatch("increment does not match the grid".into()));
            }
            grid.check_points(points)?;
            let kernel = GridKernel::new(params);
            Ok(grid_displacement(grid, &kernel, points.coords(), &inc.values))
        }
        NoiseBackend::ExactCovariance => {
            if inc.units() != points.len() {
                return Err(Error::DimensionMismatch("increment does not match the landmark count".into()));
            }
            let l = factor_psd(&gram_g(params, points))?;
            Ok(exact_displacement(&l, &inc.values, points.dim()))
        }
    }
}

/// Displacement of a superset of points under the grid backend.
///
/// Each point's displacement depends only on its own position and the node
/// increments, so any prefix moves exactly as it would on its own.
pub fn extend_points(
    backend: &NoiseBackend,
    params: &KernelParams,
    superset: &LandmarkConfig,
    inc: &NoiseIncrement,
) -> Result<Vec<f64>> {
    match backend {
        NoiseBackend::GridQuadrature(_) => drive(backend, params, superset, inc),
        NoiseBackend::ExactCovariance => Err(Error::Unsupported(
            "the exact covariance backend is bound to one configuration and cannot drive extra points".into(),
        )),
    }
}

pub(crate) fn grid_displacement(grid: &NoiseGrid, kernel: &GridKernel, coords: &[f64], noise: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let w = grid.weight();
    let mut out = vec![0.0; coords.len()];
    for (p, o) in coords.chunks(d).zip(out.chunks_mut(d)) {
        let mut acc = [0.0f64; 3];
        grid.visit(kernel, p, |j, _, k| {
            for a in 0..d {
                acc[a] += k * noise[j * d + a];
            }
        });
        for a in 0..d {
            o[a] = w * acc[a];
        }
    }
    out
}

/// `(L ⊗ I_d) w` for a lower-triangular `n x n` factor `L`.
pub(crate) fn exact_displacement(l: &DMatrix<f64>, w: &[f64], d: usize) -> Vec<f64> {
    let n = l.nrows();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..=i {
            let lij = l[(i, j)];
            if lij != 0.0 {
                for a in 0..d {
                    out[i * d + a] += lij * w[j * d + a];
                }
            }
        }
    }
    out
}

const REPLAY_MAGIC: &[u8; 8] = b"KNOISE01";

/// A recorded grid noise realization.
///
/// Byte layout, all little-endian:
///
/// ```text
/// magic    8 bytes  "KNOISE01"
/// seed     u64
/// stream   u64
/// d        u32
/// h        f64
/// lower    d x f64
/// counts   d x u64
/// steps    u64
/// dt       f64
/// payload  steps x nodes x d f64   (step-major, then node, then axis)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayRecord {
    pub grid: NoiseGrid,
    pub stream: NoiseStream,
    pub dt: f64,
    pub increments: Vec<NoiseIncrement>,
}

impl ReplayRecord {
    /// Regenerate `steps` increments from their keys. Step indices start at 0.
    pub fn generate(grid: &NoiseGrid, stream: NoiseStream, steps: usize, dt: f64) -> Self {
        let d = grid.dim();
        let nodes = grid.node_count();
        let increments = (0..steps).map(|s| keyed_increment(nodes, d, dt, &stream, s as u64)).collect();
        Self { grid: grid.clone(), stream, dt, increments }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.grid.dim();
        w.write_all(REPLAY_MAGIC)?;
        w.write_all(&self.stream.seed.to_le_bytes())?;
        w.write_all(&self.stream.stream.to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        w.write_all(&self.grid.spacing.to_le_bytes())?;
        for v in &self.grid.lower {
            w.write_all(&v.to_le_bytes())?;
        }
        for &c in &self.grid.counts {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        w.write_all(&(self.increments.len() as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.grid.node_count() * d * 8);
        for inc in &self.increments {
            buf.clear();
            for v in &inc.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != REPLAY_MAGIC {
            return Err(Error::Format("not a noise replay record".into()));
        }
        let seed = read_u64(&mut r)?;
        let stream = read_u64(&mut r)?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        if !(1..=3).contains(&d) {
            return Err(Error::Format(format!("bad dimension {d}")));
        }
        let h = read_f64(&mut r)?;
        let lower = (0..d).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let counts = (0..d).map(|_| read_u64(&mut r).map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let grid = NoiseGrid::new(lower, counts, h)?;
        let steps = read_u64(&mut r)? as usize;
        let dt = read_f64(&mut r)?;
        let per_step = grid.node_count() * d;
        let mut bytes = vec![0u8; per_step * 8];
        let mut increments = Vec::with_capacity(steps);
        for _ in 0..steps {
            r.read_exact(&mut bytes)?;
            let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            increments.push(NoiseIncrement { dt, dim: d, values });
        }
        Ok(Self { grid, stream: NoiseStream::new(seed, stream), dt, increments })
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}
