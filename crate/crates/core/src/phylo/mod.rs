//! Shapes evolving along the branches of a rooted tree.
//!
//! The tree skeleton comes from a Newick string; leaf observations are
//! attached by name. Inference runs backward filtering (Gaussian messages
//! from the leaves to the root) and forward guiding (guided bridges along
//! every edge) inside an MCMC loop over the kernel amplitude and length
//! scale.

mod filter;
mod mcmc;
mod newick;

pub use filter::{backward_filter, forward_guide, simulate_tree, GuideOutput, Message, Messages};
pub use mcmc::{mcmc_infer, posterior_summary, ChainRecord, ChainState, LogNormalPrior, McmcConfig, McmcResult, PosteriorSummary, Priors};
pub use newick::parse_newick;

use crate::error::{Error, Result};
use crate::landmarks::LandmarkConfig;
use std::collections::HashMap;

/// A node of the tree skeleton. `edge_length` is the length of the edge to
/// the parent (ignored for the root).
#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub name: Option<String>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub edge_length: f64,
}

/// Topology and edge lengths. Nodes are stored in preorder, so every parent
/// precedes its children and node 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeSkeleton {
    pub nodes: Vec<TreeNode>,
}

impl TreeSkeleton {
    pub fn root(&self) -> usize {
        0
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].children.is_empty()).collect()
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.nodes[i].children.is_empty()
    }

    /// Non-root nodes in preorder; each identifies the edge above it.
    pub fn edges(&self) -> impl Iterator<Item = usize> + '_ {
        1..self.nodes.len()
    }

    /// One past the last node of the subtree rooted at `v`; the subtree
    /// occupies `v..subtree_end(v)` in preorder.
    pub fn subtree_end(&self, v: usize) -> usize {
        let mut end = v + 1;
        let mut u = v;
        while let Some(&last) = self.nodes[u].children.last().filter(|&&c| c > u && c < self.nodes.len()) {
            end = last + 1;
            u = last;
        }
        end
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name.as_deref() == Some(name))
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || self.nodes[0].parent.is_some() {
            return Err(Error::InvalidTree("tree needs a single root at index 0".into()));
        }
        for (v, n) in self.nodes.iter().enumerate() {
            let mut next = v + 1;
            for &c in &n.children {
                if c != next || c >= self.nodes.len() {
                    return Err(Error::InvalidTree("nodes must be stored in preorder".into()));
                }
                next = self.subtree_end(c);
            }
        }
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            match n.parent {
                Some(p) if p < i && self.nodes[p].children.contains(&i) => {}
                _ => return Err(Error::InvalidTree(format!("node {i} has an inconsistent parent link"))),
            }
            if !(n.edge_length > 0.0 && n.edge_length.is_finite()) {
                return Err(Error::InvalidTree(format!(
                    "edge above node {} has length {}, must be > 0",
                    n.name.as_deref().unwrap_or("?"),
                    n.edge_length
                )));
            }
        }
        Ok(())
    }
}

/// A tree with its root state and leaf observations.
#[derive(Clone, Debug, PartialEq)]
pub struct PhyloTree {
    pub skeleton: TreeSkeleton,
    pub root_state: LandmarkConfig,
    /// Observation per node; only leaves may carry one. A leaf without an
    /// observation contributes no information.
    pub observations: Vec<Option<LandmarkConfig>>,
    /// Standard deviation `ε` of the isotropic observation noise.
    pub obs_noise: f64,
}

impl PhyloTree {
    pub fn new(
        skeleton: TreeSkeleton,
        root_state: LandmarkConfig,
        leaf_data: &HashMap<String, LandmarkConfig>,
        obs_noise: f64,
    ) -> Result<Self> {
        skeleton.validate()?;
        if !(obs_noise >= 0.0 && obs_noise.is_finite()) {
            return Err(Error::ParameterDomain(format!("observation noise must be >= 0, got {obs_noise}")));
        }
        let mut observations = vec![None; skeleton.nodes.len()];
        for (name, obs) in leaf_data {
            let i = skeleton.find(name).ok_or_else(|| Error::InvalidTree(format!("no node named {name}")))?;
            if !skeleton.is_leaf(i) {
                return Err(Error::InvalidTree(format!("node {name} is not a leaf")));
            }
            if obs.dim() != root_state.dim() || obs.len() != root_state.len() {
                return Err(Error::DimensionMismatch(format!("observation {name} does not match the root shape")));
            }
            observations[i] = Some(obs.clone());
        }
        Ok(Self { skeleton, root_state, observations, obs_noise })
    }

    pub fn dim(&self) -> usize {
        self.root_state.dim()
    }

    pub fn landmarks(&self) -> usize {
        self.root_state.len()
    }
}
