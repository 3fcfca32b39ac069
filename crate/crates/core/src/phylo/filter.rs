//! Backward filtering and forward guiding on a tree.
//!
//! Every message is a Gaussian `N(ν, P ⊗ I_d)` in the child-side state,
//! times a constant. Along an edge of length `Δt` the zero-drift auxiliary
//! with frozen diffusion `ã` widens it to `P + Δt ã`; at a node the children
//! are multiplied together. The product of Gaussians in the same variable is
//! again Gaussian, and its normalizing constant is kept in `log_const` so
//! that the likelihood estimate carries the parameter dependence of the
//! fusions.

use super::PhyloTree;
use crate::bridges::{aux_from_observation, run_guided_with, Auxiliary, Guide, GuidedRun, GuidedScheme};
use crate::error::{Error, Result};
use crate::kernels::{factor_psd, gram_g, KernelParams};
use crate::landmarks::LandmarkConfig;
use crate::noise::{exact_displacement, keyed_increment};
use crate::rng::NoiseStream;
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::f64::consts::PI;

/// `exp(log_const) · N(mean; x, cov ⊗ I_d)` as a function of the node
/// state `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    /// `n·d`, landmark-major.
    pub mean: Vec<f64>,
    /// `n x n` scalar factor of the covariance.
    pub cov: DMatrix<f64>,
    pub log_const: f64,
}

/// Output of the backward pass.
#[derive(Clone, Debug)]
pub struct Messages {
    pub dim: usize,
    /// Node message (after fusing the children, or the observation at a
    /// leaf). `None` for subtrees without observations.
    pub nodes: Vec<Option<Message>>,
    /// Frozen auxiliary of the edge above each non-root node with a message.
    pub edge_aux: Vec<Option<Auxiliary>>,
}

impl Messages {
    pub fn root(&self) -> Option<&Message> {
        self.nodes[0].as_ref()
    }

    /// Message sent up the edge above `node`: `(ν, P + Δt ã)`.
    pub fn propagated(&self, tree: &PhyloTree, node: usize) -> Option<Message> {
        let m = self.nodes[node].as_ref()?;
        let aux = self.edge_aux[node].as_ref()?;
        let dt = tree.skeleton.nodes[node].edge_length;
        Some(Message { mean: m.mean.clone(), cov: &m.cov + &aux.gram * dt, log_const: m.log_const })
    }

    /// `log h̃_root(x_root)`: the Gaussian approximation of the data
    /// likelihood at the root state.
    pub fn root_log_density(&self, x: &[f64]) -> Result<f64> {
        let m = self.root().ok_or(Error::SingularFusion(0))?;
        Ok(m.log_const + log_gauss(&m.mean, x, &m.cov, self.dim)?)
    }
}

/// `log N(a; b, S ⊗ I_d)`.
fn log_gauss(a: &[f64], b: &[f64], s: &DMatrix<f64>, d: usize) -> Result<f64> {
    let n = s.nrows();
    let chol = s.clone().cholesky().ok_or(Error::Factorization("message covariance is not positive definite".into()))?;
    let r = DMatrix::from_fn(n, d, |i, c| a[i * d + c] - b[i * d + c]);
    let sol = chol.solve(&r);
    let quad = r.component_mul(&sol).sum();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (d as f64 * (n as f64 * (2.0 * PI).ln() + logdet) + quad))
}

/// Product of Gaussian factors in the same variable.
///
/// `Π_i N(x; ν_i, P_i) = exp(C) N(x; ν, P)` with `P⁻¹ = Σ P_i⁻¹`,
/// `ν = P Σ P_i⁻¹ ν_i`. Each term of `C` is a sum over the inputs, so the
/// result does not depend on their order beyond rounding.
fn fuse(parts: &[Message], d: usize) -> Result<Message> {
    let n = parts[0].cov.nrows();
    let mut prec = DMatrix::zeros(n, n);
    let mut info = DMatrix::zeros(n, d);
    let mut c = 0.0;
    let half_log2pi = n as f64 * (2.0 * PI).ln();
    for m in parts {
        let chol = m
            .cov
            .clone()
            .cholesky()
            .ok_or(Error::Factorization("message covariance is not positive definite".into()))?;
        let inv = chol.inverse();
        let nu = DMatrix::from_row_slice(n, d, &m.mean);
        let pn = &inv * &nu;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        c += m.log_const - 0.5 * (d as f64 * (half_log2pi + logdet) + nu.component_mul(&pn).sum());
        prec += inv;
        info += pn;
    }
    let prec = (&prec + prec.transpose()) * 0.5;
    let chol = prec
        .cholesky()
        .ok_or(Error::Factorization("fused precision is not positive definite".into()))?;
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    let mean = &cov * &info;
    let logdet_cov = -2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    c += 0.5 * (d as f64 * (half_log2pi + logdet_cov) + mean.component_mul(&info).sum());
    let mut flat = Vec::with_capacity(n * d);
    for i in 0..n {
        flat.extend(mean.row(i).iter());
    }
    Ok(Message { mean: flat, cov, log_const: c })
}

/// Leaf-to-root Gaussian messages for kernel `params`.
///
/// Leaves carry `(observation, ε² I)`; the auxiliary on each edge is frozen
/// at the child-side message mean. Leaves without observations send
/// nothing. An internal node none of whose children sends a message is a
/// singular fusion.
pub fn backward_filter(tree: &PhyloTree, params: &KernelParams) -> Result<Messages> {
    params.validate()?;
    let d = tree.dim();
    let n = tree.landmarks();
    if params.dim != d {
        return Err(Error::DimensionMismatch("kernel and landmark dimensions differ".into()));
    }
    let sk = &tree.skeleton;
    let len = sk.nodes.len();
    let mut nodes: Vec<Option<Message>> = vec![None; len];
    let mut edge_aux: Vec<Option<Auxiliary>> = vec![None; len];
    let eps2 = tree.obs_noise * tree.obs_noise;
    // preorder storage, so a reverse sweep sees children before parents
    for v in (0..len).rev() {
        let msg = if sk.is_leaf(v) {
            tree.observations[v].as_ref().map(|obs| Message {
                mean: obs.coords().to_vec(),
                cov: DMatrix::identity(n, n) * eps2,
                log_const: 0.0,
            })
        } else {
            let parts: Vec<Message> = sk.nodes[v]
                .children
                .iter()
                .filter_map(|&c| {
                    let m = nodes[c].as_ref()?;
                    let aux = edge_aux[c].as_ref()?;
                    let dt = sk.nodes[c].edge_length;
                    Some(Message { mean: m.mean.clone(), cov: &m.cov + &aux.gram * dt, log_const: m.log_const })
                })
                .collect();
            if parts.is_empty() {
                return Err(Error::SingularFusion(v));
            }
            Some(fuse(&parts, d)?)
        };
        if let Some(m) = &msg {
            if v != 0 {
                let at = LandmarkConfig::from_raw(m.mean.clone(), d);
                edge_aux[v] = Some(aux_from_observation(params, &at)?);
            }
        }
        nodes[v] = msg;
    }
    Ok(Messages { dim: d, nodes, edge_aux })
}

/// Number of Euler steps on an edge of length `len` at target step `dt`.
pub(crate) fn edge_steps(len: f64, dt: f64) -> usize {
    ((len / dt).round() as usize).max(2)
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct GuideOutput {
    /// Sampled state at every node (the root state at index 0).
    pub states: Vec<Vec<f64>>,
    /// Path along the edge above each node (endpoints only unless recorded).
    pub edge_paths: Vec<Option<GuidedRun>>,
    /// `Σ ∫ G dt` over all guided edges.
    pub log_weight: f64,
    /// Estimate of the log likelihood of the observations:
    /// `log h̃_root(x_root) + Σ log_weight`. Internal fusion constants are
    /// part of `h̃_root`.
    pub log_likelihood: f64,
    /// `Σ log N(observation; leaf state, ε² I)` over observed leaves with
    /// `ε > 0`. Reported for diagnostics; it is already accounted for by the
    /// messages and is not part of `log_likelihood`.
    pub leaf_log_likelihood: f64,
}

/// Root-to-leaf pass. Each edge runs a guided bridge (Euler-Maruyama on
/// `innovations[node]`, `steps[node]` steps) towards the child-side
/// message. Edges into unobserved subtrees are simulated unconditioned.
/// Exact leaf observations (`ε = 0`) are hit by stopping one step early and
/// setting the leaf state to the observation.
pub fn forward_guide(
    tree: &PhyloTree,
    messages: &Messages,
    params: &KernelParams,
    innovations: &[Vec<f64>],
    steps: &[usize],
    record: bool,
) -> Result<GuideOutput> {
    let sk = &tree.skeleton;
    let len = sk.nodes.len();
    let d = tree.dim();
    let n = tree.landmarks();
    if innovations.len() != len || steps.len() != len {
        return Err(Error::DimensionMismatch("one innovation block and step count per node expected".into()));
    }
    let mut states: Vec<Vec<f64>> = vec![Vec::new(); len];
    states[0] = tree.root_state.coords().to_vec();
    let mut edge_paths: Vec<Option<GuidedRun>> = vec![None; len];
    let mut log_weight = 0.0;
    let mut leaf_ll = 0.0;
    let eps2 = tree.obs_noise * tree.obs_noise;
    for v in sk.edges() {
        let parent = sk.nodes[v].parent.expect("non-root node");
        let (run, end) = run_edge(tree, messages, params, v, &states[parent], &innovations[v], steps[v], record)?;
        log_weight += run.log_weight;
        if let Some(obs) = &tree.observations[v] {
            if eps2 > 0.0 {
                let r2: f64 = obs.coords().iter().zip(&end).map(|(a, b)| (a - b) * (a - b)).sum();
                leaf_ll += -0.5 * ((n * d) as f64 * (2.0 * PI * eps2).ln() + r2 / eps2);
            }
        }
        states[v] = end;
        edge_paths[v] = Some(run);
    }
    let root_term = messages.root_log_density(&states[0])?;
    Ok(GuideOutput {
        states,
        edge_paths,
        log_weight,
        log_likelihood: root_term + log_weight,
        leaf_log_likelihood: leaf_ll,
    })
}

/// Runs the edge above `v` from `x0` and returns the run with the child
/// state (the observation itself for an exact leaf).
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_edge(
    tree: &PhyloTree,
    messages: &Messages,
    params: &KernelParams,
    v: usize,
    x0: &[f64],
    w: &[f64],
    steps: usize,
    record: bool,
) -> Result<(GuidedRun, Vec<f64>)> {
    let nd = tree.landmarks() * tree.dim();
    let horizon = tree.skeleton.nodes[v].edge_length;
    if w.len() != steps * nd {
        return Err(Error::DimensionMismatch(format!("innovations for node {v} do not match its step grid")));
    }
    let innovation = |s: usize| w[s * nd..(s + 1) * nd].to_vec();
    match (&messages.nodes[v], &messages.edge_aux[v]) {
        (Some(m), Some(aux)) => {
            let exact = m.cov.iter().all(|&c| c == 0.0);
            let guide = Guide::new(aux, &m.mean, (!exact).then_some(&m.cov), horizon)?;
            let run = run_guided_with(params, &guide, x0, steps, innovation, record, GuidedScheme::DriftImplicit)?;
            let end = if exact { m.mean.clone() } else { run.positions.last().unwrap().clone() };
            Ok((run, end))
        }
        _ => {
            let run = run_free(params, x0, tree.dim(), horizon, steps, innovation, record)?;
            let end = run.positions.last().unwrap().clone();
            Ok((run, end))
        }
    }
}

/// Unconditioned Euler-Maruyama run of `dX = G(X)^{1/2} dW`.
fn run_free<F: FnMut(usize) -> Vec<f64>>(
    params: &KernelParams,
    x0: &[f64],
    d: usize,
    horizon: f64,
    steps: usize,
    mut innovation: F,
    record: bool,
) -> Result<GuidedRun> {
    let dt = horizon / steps as f64;
    let sdt = dt.sqrt();
    let mut x = x0.to_vec();
    let mut times = vec![0.0];
    let mut positions = vec![x.clone()];
    for s in 0..steps {
        let g = gram_g(params, &LandmarkConfig::from_raw(x.clone(), d));
        let l = factor_psd(&g)?;
        let dw = exact_displacement(&l, &innovation(s), d);
        for (xi, e) in x.iter_mut().zip(&dw) {
            *xi += sdt * e;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { time: (s + 1) as f64 * dt });
        }
        if record || s + 1 == steps {
            times.push((s + 1) as f64 * dt);
            positions.push(x.clone());
        }
    }
    Ok(GuidedRun { times, positions, log_weight: 0.0, stiffness: 0.0 })
}

/// Standard normal innovations for every edge, keyed by node on `stream`.
pub(crate) fn draw_innovations(tree: &PhyloTree, steps: &[usize], stream: &NoiseStream) -> Vec<Vec<f64>> {
    let n = tree.landmarks();
    let d = tree.dim();
    (0..tree.skeleton.nodes.len())
        .map(|v| {
            if v == 0 {
                return Vec::new();
            }
            let sub = stream.substream(v as u64);
            (0..steps[v]).flat_map(|s| keyed_increment(n, d, 1.0, &sub, s as u64).values).collect()
        })
        .collect()
}

/// Step counts per node for a target step size `dt` (zero for the root).
pub(crate) fn step_grid(tree: &PhyloTree, dt: f64) -> Vec<usize> {
    (0..tree.skeleton.nodes.len())
        .map(|v| if v == 0 { 0 } else { edge_steps(tree.skeleton.nodes[v].edge_length, dt) })
        .collect()
}

/// Simulates the Kunita landmark process (Itô, exact covariance) down the
/// tree from `tree.root_state` and returns the state at every node together
/// with leaf observations perturbed by `N(0, ε² I)`.
///
/// Only `tree.skeleton`, `tree.root_state` and `tree.obs_noise` are used.
pub fn simulate_tree(
    tree: &PhyloTree,
    params: &KernelParams,
    dt: f64,
    stream: &NoiseStream,
) -> Result<(Vec<LandmarkConfig>, HashMap<String, LandmarkConfig>)> {
    params.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidTime(format!("step must be > 0, got {dt}")));
    }
    let sk = &tree.skeleton;
    let d = tree.dim();
    let n = tree.landmarks();
    let steps = step_grid(tree, dt);
    let w = draw_innovations(tree, &steps, stream);
    let mut states: Vec<Vec<f64>> = vec![Vec::new(); sk.nodes.len()];
    states[0] = tree.root_state.coords().to_vec();
    for v in sk.edges() {
        let parent = sk.nodes[v].parent.expect("non-root node");
        let x0 = states[parent].clone();
        let block = &w[v];
        let run = run_free(params, &x0, d, sk.nodes[v].edge_length, steps[v], |s| block[s * n * d..(s + 1) * n * d].to_vec(), false)?;
        states[v] = run.positions.last().unwrap().clone();
    }
    let obs_stream = stream.substream(u64::MAX);
    let mut data = HashMap::new();
    for v in sk.leaves() {
        let noise = keyed_increment(n, d, 1.0, &obs_stream, v as u64).values;
        let obs: Vec<f64> = states[v].iter().zip(&noise).map(|(x, e)| x + tree.obs_noise * e).collect();
        let name = sk.nodes[v].name.clone().unwrap_or_else(|| format!("node{v}"));
        data.insert(name, LandmarkConfig::point_set(obs, d)?);
    }
    let configs = states.into_iter().map(|s| LandmarkConfig::from_raw(s, d)).collect();
    Ok((configs, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridges::{simulate_bridge_with, BridgeMethod, BridgeSpec};
    use crate::noise::NoiseBackend;
    use crate::phylo::parse_newick;

    fn se(alpha: f64, sigma: f64, d: usize) -> KernelParams {
        KernelParams::squared_exponential(alpha, sigma, d).unwrap()
    }

    fn tree(newick: &str, root: &[f64], d: usize, data: &[(&str, Vec<f64>)], eps: f64) -> PhyloTree {
        let obs = data.iter().map(|(k, v)| (k.to_string(), LandmarkConfig::new(v.clone(), d).unwrap())).collect();
        PhyloTree::new(parse_newick(newick).unwrap(), LandmarkConfig::point_set(root.to_vec(), d).unwrap(), &obs, eps).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn single_edge_root_message() {
        let y = vec![0.1, 0.2, 1.3, -0.4, -0.8, 0.9];
        let t = tree("(A:0.7);", &[0.0; 6], 2, &[("A", y.clone())], 0.0);
        let p = se(0.6, 0.9, 2);
        let m = backward_filter(&t, &p).unwrap();
        let root = m.root().unwrap();
        let aux = aux_from_observation(&p, &LandmarkConfig::new(y.clone(), 2).unwrap()).unwrap();
        for (a, b) in root.mean.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in root.cov.iter().zip((&aux.gram * 0.7).iter()) {
            assert!(close(*a, *b, 1e-10), "{a} {b}");
        }
        assert!(root.log_const.abs() < 1e-9);
    }

    #[test]
    fn identical_leaves_halve_the_covariance() {
        let y = vec![0.0, 0.0, 1.0, 0.5];
        let t = tree("(A:1,B:1);", &[0.0; 4], 2, &[("A", y.clone()), ("B", y.clone())], 0.1);
        let p = se(0.5, 1.0, 2);
        let m = backward_filter(&t, &p).unwrap();
        let root = m.root().unwrap();
        let single = m.propagated(&t, 1).unwrap();
        for (a, b) in root.mean.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in root.cov.iter().zip(single.cov.iter()) {
            assert!(close(*a, 0.5 * b, 1e-12));
        }
    }

    fn log_n(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * ((2.0 * PI * var).ln() + (x - mean) * (x - mean) / var)
    }

    #[test]
    fn caterpillar_matches_scalar_algebra() {
        let (ya, yb, yc, eps) = (0.2, -0.5, 1.0, 0.2);
        let t = tree("((A:0.3,B:0.6):0.4,C:1.1);", &[0.0], 1, &[("A", vec![ya]), ("B", vec![yb]), ("C", vec![yc])], eps);
        let p = se(0.7, 1.3, 1);
        // one landmark: ã = g(0) wherever it is frozen
        let g0 = 0.7f64.powi(2) * PI.sqrt() * 1.3;
        assert!(close(p.g(0.0), g0, 1e-14));
        let e2 = eps * eps;
        let (pa, pb, pc) = (e2 + 0.3 * g0, e2 + 0.6 * g0, e2 + 1.1 * g0);
        let p_ab = 1.0 / (1.0 / pa + 1.0 / pb);
        let nu_ab = p_ab * (ya / pa + yb / pb);
        let c_ab = log_n(ya, yb, pa + pb);
        let p_up = p_ab + 0.4 * g0;
        let p_root = 1.0 / (1.0 / p_up + 1.0 / pc);
        let nu_root = p_root * (nu_ab / p_up + yc / pc);
        let c_root = c_ab + log_n(nu_ab, yc, p_up + pc);

        let m = backward_filter(&t, &p).unwrap();
        let inner = m.nodes[1].as_ref().unwrap();
        assert!(close(inner.mean[0], nu_ab, 1e-12) && close(inner.cov[(0, 0)], p_ab, 1e-12));
        assert!(close(inner.log_const, c_ab, 1e-12));
        let root = m.root().unwrap();
        assert!(close(root.mean[0], nu_root, 1e-12), "{} {nu_root}", root.mean[0]);
        assert!(close(root.cov[(0, 0)], p_root, 1e-12));
        assert!(close(root.log_const, c_root, 1e-12), "{} {c_root}", root.log_const);
    }

    fn three_leaf_data() -> Vec<(&'static str, Vec<f64>)> {
        vec![
            ("A", vec![0.0, 0.1, 1.0, -0.2, 0.4, 0.9]),
            ("B", vec![0.2, -0.1, 1.1, 0.1, 0.5, 1.2]),
            ("C", vec![-0.3, 0.0, 0.8, -0.4, 0.2, 0.7]),
        ]
    }

    #[test]
    fn fusion_ignores_child_order() {
        let data = three_leaf_data();
        let p = se(0.5, 1.0, 2);
        let a = backward_filter(&tree("(A:1,B:0.7,C:1.3);", &[0.0; 6], 2, &data, 0.1), &p).unwrap();
        let b = backward_filter(&tree("(C:1.3,A:1,B:0.7);", &[0.0; 6], 2, &data, 0.1), &p).unwrap();
        let (ra, rb) = (a.root().unwrap(), b.root().unwrap());
        for (x, y) in ra.mean.iter().zip(&rb.mean) {
            assert!(close(*x, *y, 1e-12));
        }
        for (x, y) in ra.cov.iter().zip(rb.cov.iter()) {
            assert!(close(*x, *y, 1e-12));
        }
        assert!(close(ra.log_const, rb.log_const, 1e-12));
    }

    #[test]
    fn fused_covariance_is_below_each_child() {
        let t = tree("(A:1,B:0.7,C:1.3);", &[0.0; 6], 2, &three_leaf_data(), 0.1);
        let m = backward_filter(&t, &se(0.5, 1.0, 2)).unwrap();
        let root = m.root().unwrap();
        for c in 1..4 {
            let diff = &m.propagated(&t, c).unwrap().cov - &root.cov;
            let eig = diff.symmetric_eigenvalues();
            assert!(eig.min() > -1e-12, "{eig}");
        }
    }

    #[test]
    fn subtree_without_data_is_a_singular_fusion() {
        let t = tree("((A:1,B:1):1,C:1);", &[0.0; 2], 2, &[("C", vec![1.0, 0.0])], 0.1);
        assert!(matches!(backward_filter(&t, &se(0.5, 1.0, 2)), Err(Error::SingularFusion(1))));
        // a single unobserved leaf next to an observed one is fine
        let t = tree("(A:1,B:1);", &[0.0; 2], 2, &[("B", vec![1.0, 0.0])], 0.1);
        let m = backward_filter(&t, &se(0.5, 1.0, 2)).unwrap();
        let steps = step_grid(&t, 0.1);
        let w = draw_innovations(&t, &steps, &NoiseStream::new(3, 0));
        let out = forward_guide(&t, &m, &se(0.5, 1.0, 2), &w, &steps, false).unwrap();
        assert_eq!(out.edge_paths[1].as_ref().unwrap().log_weight, 0.0);
        assert!(out.log_likelihood.is_finite());
    }

    #[test]
    fn single_exact_edge_is_a_bridge() {
        let y = vec![0.3, 0.2, 1.2, 0.1, -0.4, 1.4];
        let x0 = vec![0.0, 0.0, 1.0, 0.5, -0.5, 1.0];
        let t = tree("(A:1);", &x0, 2, &[("A", y.clone())], 0.0);
        let p = se(0.8, 1.0, 2);
        let m = backward_filter(&t, &p).unwrap();
        let steps = vec![0, 50];
        let stream = NoiseStream::new(11, 4);
        let w = draw_innovations(&t, &steps, &stream);
        let out = forward_guide(&t, &m, &p, &w, &steps, true).unwrap();
        let spec = BridgeSpec {
            target: LandmarkConfig::new(y.clone(), 2).unwrap(),
            horizon: 1.0,
            method: BridgeMethod::Guided { aux: m.edge_aux[1].clone().unwrap() },
            steps: 50,
            clamp: false,
            obs_variance: 0.0,
            scheme: GuidedScheme::DriftImplicit,
        };
        let x0 = LandmarkConfig::new(x0, 2).unwrap();
        let b = simulate_bridge_with(&spec, &p, &x0, &NoiseBackend::ExactCovariance, &stream.substream(1)).unwrap();
        let run = out.edge_paths[1].as_ref().unwrap();
        assert_eq!(run.positions, b.path.positions);
        assert_eq!(out.log_weight, b.log_weight);
        assert_eq!(out.states[1], y);
    }

    #[test]
    fn vanishing_amplitude_gives_straight_lines() {
        let data = [("A", vec![1.0, 0.0]), ("B", vec![0.0, 1.0]), ("C", vec![-1.0, -1.0])];
        let t = tree("((A:1,B:1):1,C:1);", &[0.2, 0.3], 2, &data, 0.0);
        let p = se(1e-7, 1.0, 2);
        let m = backward_filter(&t, &p).unwrap();
        let steps = step_grid(&t, 0.05);
        let w = draw_innovations(&t, &steps, &NoiseStream::new(5, 0));
        let out = forward_guide(&t, &m, &p, &w, &steps, true).unwrap();
        // edge into the internal node heads for the fused mean, widened by
        // its covariance relative to the edge length
        let inner = m.nodes[1].as_ref().unwrap();
        let ratio = inner.cov[(0, 0)] / m.edge_aux[1].as_ref().unwrap().gram[(0, 0)];
        for (c, x) in out.states[1].iter().enumerate() {
            let x0 = out.states[0][c];
            let v = inner.mean[c];
            assert!((x - (v + (x0 - v) * ratio / (1.0 + ratio))).abs() < 1e-5);
        }
        for v in 1..t.skeleton.nodes.len() {
            let run = out.edge_paths[v].as_ref().unwrap();
            let (start, stop) = (&run.positions[0], run.positions.last().unwrap());
            let end_t = *run.times.last().unwrap();
            for (time, pos) in run.times.iter().zip(&run.positions) {
                for c in 0..2 {
                    let line = start[c] + time / end_t * (stop[c] - start[c]);
                    assert!((pos[c] - line).abs() < 1e-5, "edge {v} t {time}");
                }
            }
        }
    }

    #[test]
    fn forward_pass_is_deterministic() {
        let t = tree("(A:1,B:0.7,C:1.3);", &[0.1, 0.0, 0.9, -0.1, 0.4, 1.0], 2, &three_leaf_data(), 0.05);
        let p = se(0.5, 1.0, 2);
        let m = backward_filter(&t, &p).unwrap();
        let steps = step_grid(&t, 0.02);
        let w = draw_innovations(&t, &steps, &NoiseStream::new(8, 1));
        let a = forward_guide(&t, &m, &p, &w, &steps, false).unwrap();
        let b = forward_guide(&t, &m, &p, &w, &steps, false).unwrap();
        assert!(a.log_weight.is_finite() && a.log_likelihood.is_finite());
        assert_eq!(a.log_weight, b.log_weight);
        assert_eq!(a.log_likelihood, b.log_likelihood);
        assert_eq!(a.states, b.states);
        let short = vec![Vec::new(); 3];
        assert!(matches!(forward_guide(&t, &m, &p, &short, &steps, false), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn simulated_tree_is_reproducible() {
        let t = tree("((A:0.5,B:0.5):0.5,C:1);", &[0.0, 0.0, 1.0, 0.0], 2, &[], 0.05);
        let p = se(0.5, 1.0, 2);
        let (s1, d1) = simulate_tree(&t, &p, 0.05, &NoiseStream::new(2, 0)).unwrap();
        let (s2, d2) = simulate_tree(&t, &p, 0.05, &NoiseStream::new(2, 0)).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(d1, d2);
        let mut names: Vec<_> = d1.keys().cloned().collect();
        names.sort();
        assert_eq!(names, ["A", "B", "C"]);
        assert_eq!(s1[0].coords(), t.root_state.coords());
        let (_, d3) = simulate_tree(&t, &p, 0.05, &NoiseStream::new(3, 0)).unwrap();
        assert_ne!(d1, d3);
    }
}
