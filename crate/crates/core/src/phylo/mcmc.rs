//! Metropolis-within-Gibbs over the kernel scales and the edge innovations.
//!
//! The target is `π(α, σ, W) ∝ prior(α, σ) N(W; 0, I) L̂(α, σ, W)` where
//! `L̂` is the guided likelihood estimate of `forward_guide`. Innovations
//! move by preconditioned Crank-Nicolson, which leaves `N(0, I)` invariant,
//! so that step is accepted on the likelihood ratio alone. The scales move
//! by a Gaussian random walk on `(log α, log σ)` with priors stated on the
//! log scale, so no Jacobian appears.

use super::filter::{backward_filter, draw_innovations, forward_guide, run_edge, step_grid, Messages};
use super::PhyloTree;
use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::rng::NoiseStream;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// `log x ~ N(mean, sd²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl Default for LogNormalPrior {
    fn default() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }
}

impl LogNormalPrior {
    /// Log density of `log x` (up to a constant).
    pub fn log_density(&self, log_x: f64) -> f64 {
        let z = (log_x - self.mean) / self.sd;
        -0.5 * z * z
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.sd > 0.0 && self.sd.is_finite() && self.mean.is_finite()) {
            return Err(Error::ParameterDomain(format!("{what} prior needs finite mean and sd > 0")));
        }
        Ok(())
    }
}

/// Priors on the amplitude and length scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub alpha: LogNormalPrior,
    pub sigma: LogNormalPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub iterations: usize,
    /// Standard deviation of the random walk on `(log α, log σ)`.
    pub rw_scale: f64,
    /// Crank-Nicolson persistence `ρ ∈ [0, 1]`.
    pub pcn_rho: f64,
    pub seed: u64,
    /// Target Euler step on each edge.
    pub dt: f64,
    /// Fraction of the chain discarded by `posterior_summary`.
    pub burn_in: f64,
    /// Crank-Nicolson passes over all edges per iteration.
    pub innovation_sweeps: usize,
    /// Starting values; the prior medians when absent. A start the grid
    /// cannot resolve has its amplitude halved until it can.
    pub initial_alpha: Option<f64>,
    pub initial_sigma: Option<f64>,
    /// Proposals whose guided runs exceed this stiffness (see
    /// `GuidedRun::stiffness`) are rejected as unresolved by the grid.
    pub max_stiffness: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            rw_scale: 0.05,
            pcn_rho: 0.95,
            seed: 0,
            dt: 0.01,
            burn_in: 0.2,
            innovation_sweeps: 3,
            initial_alpha: None,
            initial_sigma: None,
            max_stiffness: 2.0,
        }
    }
}

impl McmcConfig {
    fn validate(&self) -> Result<()> {
        if !(self.rw_scale >= 0.0 && self.rw_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("rw_scale must be >= 0, got {}", self.rw_scale)));
        }
        if !(0.0..=1.0).contains(&self.pcn_rho) {
            return Err(Error::InvalidConfig(format!("pcn_rho must lie in [0, 1], got {}", self.pcn_rho)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::InvalidConfig(format!("burn_in must lie in [0, 1), got {}", self.burn_in)));
        }
        if self.innovation_sweeps == 0 {
            return Err(Error::InvalidConfig("innovation_sweeps must be >= 1".into()));
        }
        if !(self.max_stiffness > 0.0) {
            return Err(Error::InvalidConfig(format!("max_stiffness must be > 0, got {}", self.max_stiffness)));
        }
        for v in [self.initial_alpha, self.initial_sigma].into_iter().flatten() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("initial scales must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Current state of the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub log_alpha: f64,
    pub log_sigma: f64,
    /// Standard normal innovations per node (empty for the root), shaped
    /// `steps × n × d` on the edge above the node.
    pub innovations: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub log_posterior: f64,
    pub iteration: usize,
}

/// One row of the recorded chain. Innovations are not stored per
/// iteration; only the final state keeps them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub iteration: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub log_likelihood: f64,
    pub log_posterior: f64,
    /// At least one edge's innovations moved in this iteration.
    pub accept_innovations: bool,
    pub accept_parameters: bool,
}

#[derive(Clone, Debug)]
pub struct McmcResult {
    pub records: Vec<ChainRecord>,
    /// `None` for an empty chain.
    pub final_state: Option<ChainState>,
    /// Fraction of accepted per-edge innovation proposals.
    pub innovation_acceptance: f64,
    pub parameter_acceptance: f64,
    /// Proposals rejected because the weight or a factorization failed.
    pub failed_proposals: usize,
}

/// Forward pass cached per edge, so that an innovation update on one edge
/// only reruns the subtree below it.
struct Sweep {
    params: KernelParams,
    messages: Messages,
    states: Vec<Vec<f64>>,
    edge_weight: Vec<f64>,
    stiffness: Vec<f64>,
    root_term: f64,
}

impl Sweep {
    fn new(tree: &PhyloTree, base: &KernelParams, scales: (f64, f64), w: &[Vec<f64>], steps: &[usize], limit: f64) -> Result<Self> {
        let params = base.with_scales(scales.0.exp(), scales.1.exp())?;
        let messages = backward_filter(tree, &params)?;
        let out = forward_guide(tree, &messages, &params, w, steps, false)?;
        let edge_weight = out.edge_paths.iter().map(|p| p.as_ref().map_or(0.0, |r| r.log_weight)).collect();
        let stiffness = out.edge_paths.iter().map(|p| p.as_ref().map_or(0.0, |r| r.stiffness)).collect();
        let root_term = out.log_likelihood - out.log_weight;
        Self { params, messages, states: out.states, edge_weight, stiffness, root_term }.checked(limit)
    }

    fn log_likelihood(&self) -> f64 {
        self.root_term + self.edge_weight.iter().sum::<f64>()
    }

    fn checked(self, limit: f64) -> Result<Self> {
        let stiffness = self.stiffness.iter().copied().fold(0.0, f64::max);
        if stiffness > limit {
            return Err(Error::Unresolved { stiffness, limit });
        }
        if self.log_likelihood().is_finite() {
            Ok(self)
        } else {
            Err(Error::Diverged { time: f64::NAN })
        }
    }

    /// Copy with the subtree below `v` rerun on `block` as the innovations
    /// of edge `v` (other edges keep `w`).
    fn with_block(&self, tree: &PhyloTree, v: usize, block: &[f64], w: &[Vec<f64>], steps: &[usize], limit: f64) -> Result<Self> {
        let sk = &tree.skeleton;
        let mut states = self.states.clone();
        let mut edge_weight = self.edge_weight.clone();
        let mut stiffness = self.stiffness.clone();
        for u in v..sk.subtree_end(v) {
            let parent = sk.nodes[u].parent.expect("non-root node");
            let wu = if u == v { block } else { &w[u] };
            let (run, end) = run_edge(tree, &self.messages, &self.params, u, &states[parent], wu, steps[u], false)?;
            edge_weight[u] = run.log_weight;
            stiffness[u] = run.stiffness;
            states[u] = end;
        }
        let messages = self.messages.clone();
        Self { params: self.params, messages, states, edge_weight, stiffness, root_term: self.root_term }.checked(limit)
    }
}

/// Runs the sampler. `kernel` fixes the family and dimension; its scales
/// are replaced by the chain's.
///
/// Each iteration updates the innovations edge by edge (one
/// Crank-Nicolson proposal per edge in preorder, repeated
/// `innovation_sweeps` times), then proposes new scales.
pub fn mcmc_infer(tree: &PhyloTree, kernel: &KernelParams, priors: &Priors, config: &McmcConfig) -> Result<McmcResult> {
    config.validate()?;
    priors.alpha.validate("alpha")?;
    priors.sigma.validate("sigma")?;
    kernel.validate()?;
    if config.iterations == 0 {
        return Ok(McmcResult {
            records: Vec::new(),
            final_state: None,
            innovation_acceptance: 0.0,
            parameter_acceptance: 0.0,
            failed_proposals: 0,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let steps = step_grid(tree, config.dt);
    let mut w: Vec<Vec<f64>> = draw_innovations(tree, &steps, &NoiseStream::new(config.seed, 0)).into_iter().map(|b| vec![0.0; b.len()]).collect();
    let mut la = config.initial_alpha.map_or(priors.alpha.mean, f64::ln);
    let mut ls = config.initial_sigma.map_or(priors.sigma.mean, f64::ln);
    let log_prior = |la: f64, ls: f64| priors.alpha.log_density(la) + priors.sigma.log_density(ls);
    let limit = config.max_stiffness;
    let mut start = Sweep::new(tree, kernel, (la, ls), &w, &steps, limit);
    for _ in 0..40 {
        if !matches!(start, Err(Error::Unresolved { .. })) {
            break;
        }
        la -= std::f64::consts::LN_2;
        start = Sweep::new(tree, kernel, (la, ls), &w, &steps, limit);
    }
    let mut sweep = start?;
    let rho = config.pcn_rho;
    let comp = (1.0 - rho * rho).sqrt();
    let edges: Vec<usize> = tree.skeleton.edges().collect();
    let mut records = Vec::with_capacity(config.iterations);
    let (mut acc_w, mut tried_w, mut acc_p, mut failed) = (0usize, 0usize, 0usize, 0usize);
    for it in 0..config.iterations {
        let mut accept_w = false;
        for &v in edges.iter().cycle().take(edges.len() * config.innovation_sweeps) {
            let block: Vec<f64> = w[v].iter().map(|&x| rho * x + comp * rng.sample::<f64, _>(StandardNormal)).collect();
            let u: f64 = rng.gen();
            tried_w += 1;
            match sweep.with_block(tree, v, &block, &w, &steps, limit) {
                Ok(next) => {
                    if u.ln() < next.log_likelihood() - sweep.log_likelihood() {
                        w[v] = block;
                        sweep = next;
                        acc_w += 1;
                        accept_w = true;
                    }
                }
                Err(_) => failed += 1,
            }
        }
        let la_new = la + config.rw_scale * rng.sample::<f64, _>(StandardNormal);
        let ls_new = ls + config.rw_scale * rng.sample::<f64, _>(StandardNormal);
        let u: f64 = rng.gen();
        let accept_p = match Sweep::new(tree, kernel, (la_new, ls_new), &w, &steps, limit) {
            Ok(next) => {
                let ratio = next.log_likelihood() + log_prior(la_new, ls_new) - sweep.log_likelihood() - log_prior(la, ls);
                if u.ln() < ratio {
                    la = la_new;
                    ls = ls_new;
                    sweep = next;
                    true
                } else {
                    false
                }
            }
            Err(_) => {
                failed += 1;
                false
            }
        };
        acc_p += accept_p as usize;
        let ll = sweep.log_likelihood();
        records.push(ChainRecord {
            iteration: it,
            alpha: la.exp(),
            sigma: ls.exp(),
            log_likelihood: ll,
            log_posterior: ll + log_prior(la, ls),
            accept_innovations: accept_w,
            accept_parameters: accept_p,
        });
    }
    let ll = sweep.log_likelihood();
    Ok(McmcResult {
        final_state: Some(ChainState {
            log_alpha: la,
            log_sigma: ls,
            innovations: w,
            log_likelihood: ll,
            log_posterior: ll + log_prior(la, ls),
            iteration: config.iterations - 1,
        }),
        records,
        innovation_acceptance: if tried_w > 0 { acc_w as f64 / tried_w as f64 } else { 0.0 },
        parameter_acceptance: acc_p as f64 / config.iterations as f64,
        failed_proposals: failed,
    })
}

/// Post-burn-in marginal summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub draws: usize,
    pub alpha_mean: f64,
    pub alpha_sd: f64,
    pub alpha_interval: (f64, f64),
    pub sigma_mean: f64,
    pub sigma_sd: f64,
    pub sigma_interval: (f64, f64),
}

fn summarize(mut v: Vec<f64>) -> (f64, f64, (f64, f64)) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (mean, var.sqrt(), (q(0.05), q(0.95)))
}

/// Means, standard deviations and central 90% intervals after discarding
/// the first `burn_in` fraction. `None` when nothing remains.
pub fn posterior_summary(records: &[ChainRecord], burn_in: f64) -> Option<PosteriorSummary> {
    let start = ((records.len() as f64) * burn_in).floor() as usize;
    let kept = records.get(start..).filter(|r| !r.is_empty())?;
    let (alpha_mean, alpha_sd, alpha_interval) = summarize(kept.iter().map(|r| r.alpha).collect());
    let (sigma_mean, sigma_sd, sigma_interval) = summarize(kept.iter().map(|r| r.sigma).collect());
    Some(PosteriorSummary { draws: kept.len(), alpha_mean, alpha_sd, alpha_interval, sigma_mean, sigma_sd, sigma_interval })
}
