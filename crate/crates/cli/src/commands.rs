//! The five commands. Each writes its outputs into the run directory
//! together with `manifest.json` and `resolved_config.toml`.

use crate::config::{Backend, BridgeConfig, GridSettings, InferConfig, Method, Process, RunConfig, Section, SimulateConfig, VarianceConfig, WarpConfig};
use anyhow::{bail, Context, Result};
use kunita::bridges::{aux_from_observation, simulate_bridge_with, BridgeMethod, BridgeSpec, ConstantDiffusion, Diffusion};
use kunita::io;
use kunita::kernels::{gram_g, variance, KernelParams};
use kunita::landmarks::{LandmarkConfig, Momentum};
use kunita::noise::{NoiseBackend, NoiseGrid, ReplayRecord};
use kunita::phylo::{mcmc_infer, parse_newick, posterior_summary, PhyloTree};
use kunita::processes::{simulate, warp_points, ProcessSpec};
use kunita::rng::NoiseStream;
use rayon::prelude::*;
use serde_json::{json, Value};
use std::collections::HashMap;
use std::path::Path;

/// Seed, version and the resolved config, embedded in every output.
fn manifest<C: Section>(cfg: &RunConfig<C>) -> Result<Value> {
    Ok(json!({
        "program": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": C::NAME,
        "seed": cfg.seed,
        "config": cfg.to_json()?,
    }))
}

fn write(out: &Path, name: &str, content: impl AsRef<[u8]>) -> Result<()> {
    let path = out.join(name);
    std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))
}

/// Adds the manifest to a JSON document.
fn with_manifest(doc: &str, manifest: &Value) -> Result<String> {
    let mut value: Value = serde_json::from_str(doc)?;
    value["manifest"] = manifest.clone();
    Ok(serde_json::to_string_pretty(&value)?)
}

/// Writes `manifest.json` (manifest plus `report`) and the resolved config.
fn finish<C: Section>(cfg: &RunConfig<C>, manifest: Value, report: Value) -> Result<()> {
    let mut doc = manifest;
    doc["outputs"] = report;
    write(&cfg.out, "manifest.json", serde_json::to_string_pretty(&doc)? + "\n")?;
    write(&cfg.out, "resolved_config.toml", toml::to_string(&cfg.to_toml()?)?)
}

/// Landmarks that must be pairwise distinct.
fn read_shape(path: &Path) -> Result<LandmarkConfig> {
    let x = io::read_landmarks(path)?;
    Ok(LandmarkConfig::new(x.coords().to_vec(), x.dim())?)
}

fn build_grid(kernel: &KernelParams, x: &LandmarkConfig, g: &GridSettings) -> Result<NoiseGrid> {
    match (&g.lower, &g.upper) {
        (None, None) => Ok(NoiseGrid::covering(kernel, x, g.padding, g.spacing)?),
        (Some(lo), Some(hi)) => {
            if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, u)| !(u > l)) {
                bail!("grid corners must have equal length and upper > lower");
            }
            let h = g.spacing.unwrap_or(0.5 * kernel.sigma);
            let counts = lo.iter().zip(hi).map(|(l, u)| ((u - l) / h).ceil() as usize + 1).collect();
            Ok(NoiseGrid::new(lo.clone(), counts, h)?)
        }
        _ => bail!("grid needs both lower and upper corners, or neither"),
    }
}

pub fn run_simulate(cfg: &RunConfig<SimulateConfig>) -> Result<()> {
    let s = &cfg.section;
    let k = cfg.kernel;
    let x0 = read_shape(&s.x0)?;
    let p0 = match &s.p0 {
        Some(p) => Some(Momentum::new(io::read_landmarks(p)?.coords().to_vec(), x0.dim())?),
        None if matches!(s.process, Process::Kunita | Process::RiemannianBm) => None,
        None => Some(Momentum::zeros(x0.len(), x0.dim())),
    };
    let spec = match s.process {
        Process::Kunita => ProcessSpec::KunitaLandmark { params: k, convention: s.convention },
        Process::RiemannianBm => ProcessSpec::RiemannianBM { params: k },
        Process::StochasticEpdiff => ProcessSpec::StochasticEPDiff { params: k, grid: build_grid(&k, &x0, &s.grid)? },
        Process::InnerMomentumNoise => ProcessSpec::InnerMomentumNoise { params: k, noise_scale: s.noise_scale },
        Process::Langevin => ProcessSpec::Langevin { params: k, dissipation: s.dissipation, noise_scale: s.noise_scale },
    };
    let backend = match s.backend {
        Backend::Exact => NoiseBackend::ExactCovariance,
        Backend::Grid => NoiseBackend::GridQuadrature(build_grid(&k, &x0, &s.grid)?),
    };
    let var_q = variance(&k)?;
    let paths = (0..s.n_paths)
        .into_par_iter()
        .map(|i| simulate(&spec, &x0, p0.as_ref(), s.horizon, s.steps, &backend, &NoiseStream::new(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let m = manifest(cfg)?;
    let mut report = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let stem = format!("path_{i:05}");
        if s.format.csv() {
            write(&cfg.out, &format!("{stem}.csv"), io::path_to_csv(path))?;
        }
        if s.format.json() {
            write(&cfg.out, &format!("{stem}.json"), with_manifest(&io::path_to_json(path, None, None), &m)?)?;
        }
        report.push(json!({ "stream": i, "file": stem, "collision": path.collision }));
    }
    finish(cfg, m, json!({ "var_Q": var_q, "process": spec.name(), "backend": backend.name(), "paths": report }))
}

pub fn run_warp(cfg: &RunConfig<WarpConfig>) -> Result<()> {
    let s = &cfg.section;
    if s.frames < 2 {
        bail!("frames must be >= 2, got {}", s.frames);
    }
    if s.steps == 0 {
        bail!("steps must be >= 1");
    }
    let poly = io::read_landmarks(&s.input)?;
    let grid = build_grid(&cfg.kernel, &poly, &s.grid)?;
    let stream = NoiseStream::new(cfg.seed, 0);
    let path = warp_points(&cfg.kernel, &poly, s.horizon, s.steps, &grid, &stream)?;
    let mut frames = Vec::new();
    for f in 0..s.frames {
        let step = f * s.steps / (s.frames - 1);
        let name = format!("frame_{f:03}.csv");
        let shape = LandmarkConfig::point_set(path.positions[step].clone(), poly.dim())?;
        write(&cfg.out, &name, io::landmarks_to_csv(&shape))?;
        frames.push(json!({ "file": name, "step": step, "time": path.times[step] }));
    }
    let replay = if s.replay {
        let record = ReplayRecord::generate(&grid, stream, s.steps, s.horizon / s.steps as f64);
        let mut bytes = Vec::new();
        record.write_to(&mut bytes)?;
        write(&cfg.out, "noise.knoise", bytes)?;
        Some("noise.knoise")
    } else {
        None
    };
    let m = manifest(cfg)?;
    finish(cfg, m, json!({ "frames": frames, "grid": grid, "replay": replay }))
}

pub fn run_bridge(cfg: &RunConfig<BridgeConfig>) -> Result<()> {
    let s = &cfg.section;
    let k = cfg.kernel;
    let x0 = read_shape(&s.x0)?;
    let target = read_shape(&s.target)?;
    let aux = aux_from_observation(&k, &target)?;
    let constant = match s.method {
        Method::Guided => ConstantDiffusion(aux.gram.clone()),
        Method::DelyonHu => ConstantDiffusion(gram_g(&k, &x0)),
    };
    let diffusion: &(dyn Diffusion + Sync) = if s.constant_diffusion { &constant } else { &k };
    let spec = BridgeSpec {
        target,
        horizon: s.horizon,
        method: match s.method {
            Method::DelyonHu => BridgeMethod::DelyonHu,
            Method::Guided => BridgeMethod::Guided { aux },
        },
        steps: s.steps,
        clamp: s.clamp,
        obs_variance: s.obs_variance,
        scheme: s.scheme,
    };
    let backend = NoiseBackend::ExactCovariance;
    let runs = (0..s.n_paths)
        .into_par_iter()
        .map(|i| simulate_bridge_with(&spec, diffusion, &x0, &backend, &NoiseStream::new(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let m = manifest(cfg)?;
    let mut weights = String::from("path,log_weight\n");
    let mut report = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let stem = format!("bridge_{i:05}");
        if s.format.csv() {
            write(&cfg.out, &format!("{stem}.csv"), io::path_to_csv(&run.path))?;
        }
        if s.format.json() {
            let doc = io::path_to_json(&run.path, Some(run.log_weight), run.aux_source.as_deref());
            write(&cfg.out, &format!("{stem}.json"), with_manifest(&doc, &m)?)?;
        }
        weights.push_str(&format!("{i},{}\n", io::fmt_f64(run.log_weight)));
        report.push(json!({ "stream": i, "file": stem, "log_weight": run.log_weight }));
    }
    write(&cfg.out, "weights.csv", weights)?;
    let aux_source = runs.first().and_then(|r| r.aux_source.clone());
    finish(cfg, m, json!({ "method": s.method, "aux_source": aux_source, "weights": "weights.csv", "paths": report }))
}

pub fn run_infer(cfg: &RunConfig<InferConfig>) -> Result<()> {
    let s = &cfg.section;
    let text = std::fs::read_to_string(&s.tree).with_context(|| format!("reading {}", s.tree.display()))?;
    let skeleton = parse_newick(&text)?;
    let root = io::read_landmarks(&s.root)?;
    let mut data = HashMap::new();
    for (name, file) in &s.observations {
        data.insert(name.clone(), io::read_landmarks(file)?);
    }
    let tree = PhyloTree::new(skeleton, root, &data, s.obs_noise)?;
    let result = mcmc_infer(&tree, &cfg.kernel, &s.priors, &s.mcmc)?;
    write(&cfg.out, "chain.csv", io::chain_to_csv(&result.records))?;
    let m = manifest(cfg)?;
    let summary = json!({
        "posterior": posterior_summary(&result.records, s.mcmc.burn_in),
        "burn_in": s.mcmc.burn_in,
        "innovation_acceptance": result.innovation_acceptance,
        "parameter_acceptance": result.parameter_acceptance,
        "failed_proposals": result.failed_proposals,
        "true_values": { "alpha": s.true_alpha, "sigma": s.true_sigma },
        "manifest": m,
    });
    write(&cfg.out, "summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    finish(cfg, m, json!({ "chain": "chain.csv", "summary": "summary.json" }))
}

pub fn run_variance(cfg: &RunConfig<VarianceConfig>) -> Result<()> {
    let var_q = variance(&cfg.kernel)?;
    let m = manifest(cfg)?;
    write(&cfg.out, "variance.json", serde_json::to_string_pretty(&json!({ "var_Q": var_q, "manifest": m }))? + "\n")?;
    println!("{var_q:.16e}");
    finish(cfg, m, json!({ "var_Q": var_q }))
}
