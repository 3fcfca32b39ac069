//! File formats.
//!
//! * Landmarks, JSON: `[[x, y], [x, y], ...]` (or triples in 3-d).
//! * Landmarks, CSV: header `x,y[,z]`, then one landmark per row.
//! * Paths, JSON: an object with `meta`, `dim`, `times`, `positions`
//!   (`[step][landmark][axis]`), optional `momenta`, `collision` and
//!   `log_weight`.
//! * Paths, CSV: header `time,x_0_0,x_0_1,...` (`x_<landmark>_<axis>`), one
//!   row per recorded time.
//! * Chains, CSV: `iteration,alpha,sigma,log_likelihood,log_posterior,
//!   accept_innovations,accept_parameters`.
//!
//! CSV numbers are written with 17 significant digits (`{:.16e}`), which
//! round-trips every `f64` exactly. JSON uses the shortest exact decimal.

use crate::error::{Error, Result};
use crate::landmarks::LandmarkConfig;
use crate::phylo::ChainRecord;
use crate::processes::{Collision, PathMeta, PathSample};
use serde::{Deserialize, Serialize};

const AXES: [&str; 3] = ["x", "y", "z"];

/// Lossless decimal encoding used in CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse {:?} as a number", s.trim())))
}

fn nest(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}

fn flatten(points: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let d = points.first().map_or(0, Vec::len);
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Format("points must be non-empty and of equal length".into()));
    }
    Ok((points.concat(), d))
}

/// Landmarks as a JSON array of points.
pub fn landmarks_to_json(x: &LandmarkConfig) -> String {
    serde_json::to_string(&nest(x.coords(), x.dim())).expect("plain arrays serialize")
}

/// Reads a JSON array of points. Repeated points are allowed here; callers
/// that need distinct landmarks check for themselves.
pub fn landmarks_from_json(text: &str) -> Result<LandmarkConfig> {
    let points: Vec<Vec<f64>> = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    let (flat, d) = flatten(&points)?;
    LandmarkConfig::point_set(flat, d)
}

pub fn landmarks_to_csv(x: &LandmarkConfig) -> String {
    let d = x.dim();
    let mut out = AXES[..d].join(",");
    out.push('\n');
    for p in x.points() {
        out.push_str(&p.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Reads landmark CSV. A first line that does not parse as numbers is
/// taken as a header. Blank lines are skipped.
pub fn landmarks_from_csv(text: &str) -> Result<LandmarkConfig> {
    let mut points = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if k == 0 && fields.iter().any(|f| f.trim().parse::<f64>().is_err()) {
            continue;
        }
        points.push(fields.iter().map(|f| parse_f64(f, k + 1)).collect::<Result<Vec<_>>>()?);
    }
    let (flat, d) = flatten(&points)?;
    LandmarkConfig::point_set(flat, d)
}

/// Landmarks from a file, by extension (`.json` or `.csv`).
pub fn read_landmarks(path: &std::path::Path) -> Result<LandmarkConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => landmarks_from_json(&text),
        Some("csv") => landmarks_from_csv(&text),
        _ => Err(Error::Format(format!("{}: expected a .json or .csv file", path.display()))),
    }
}

#[derive(Serialize, Deserialize)]
struct PathJson {
    meta: PathMeta,
    dim: usize,
    times: Vec<f64>,
    positions: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momenta: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    collision: Option<Collision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aux_source: Option<String>,
}

/// Path as JSON. `log_weight` and `aux_source` are added for bridges.
pub fn path_to_json(path: &PathSample, log_weight: Option<f64>, aux_source: Option<&str>) -> String {
    let d = path.dim;
    let doc = PathJson {
        meta: path.meta.clone(),
        dim: d,
        times: path.times.clone(),
        positions: path.positions.iter().map(|p| nest(p, d)).collect(),
        momenta: path.momenta.as_ref().map(|m| m.iter().map(|p| nest(p, d)).collect()),
        collision: path.collision,
        log_weight,
        aux_source: aux_source.map(str::to_string),
    };
    serde_json::to_string_pretty(&doc).expect("path serializes")
}

/// Inverse of `path_to_json`; returns the path and its log weight if any.
pub fn path_from_json(text: &str) -> Result<(PathSample, Option<f64>)> {
    let doc: PathJson = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    let flat = |rows: Vec<Vec<Vec<f64>>>| -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| {
                let (f, d) = flatten(r)?;
                if d != doc.dim {
                    return Err(Error::Format("point length differs from dim".into()));
                }
                Ok(f)
            })
            .collect()
    };
    let positions = flat(doc.positions)?;
    let momenta = doc.momenta.map(flat).transpose()?;
    if positions.len() != doc.times.len() {
        return Err(Error::Format("times and positions differ in length".into()));
    }
    Ok((
        PathSample { dim: doc.dim, times: doc.times, positions, momenta, meta: doc.meta, collision: doc.collision },
        doc.log_weight,
    ))
}

pub fn path_to_csv(path: &PathSample) -> String {
    let d = path.dim;
    let n = path.landmarks();
    let mut header = vec!["time".to_string()];
    for i in 0..n {
        for a in 0..d {
            header.push(format!("x_{i}_{a}"));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for (t, x) in path.times.iter().zip(&path.positions) {
        out.push_str(&fmt_f64(*t));
        for v in x {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

/// Reads path CSV back into `(times, positions)`.
pub fn path_from_csv(text: &str) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut times = Vec::new();
    let mut positions = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut vals = line.split(',').map(|f| parse_f64(f, k + 1));
        times.push(vals.next().ok_or_else(|| Error::Format(format!("line {}: empty row", k + 1)))??);
        positions.push(vals.collect::<Result<Vec<_>>>()?);
    }
    Ok((times, positions))
}

pub const CHAIN_HEADER: &str =
    "iteration,alpha,sigma,log_likelihood,log_posterior,accept_innovations,accept_parameters";

pub fn chain_to_csv(records: &[ChainRecord]) -> String {
    let mut out = String::from(CHAIN_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration,
            fmt_f64(r.alpha),
            fmt_f64(r.sigma),
            fmt_f64(r.log_likelihood),
            fmt_f64(r.log_posterior),
            r.accept_innovations as u8,
            r.accept_parameters as u8
        ));
    }
    out
}

pub fn chain_from_csv(text: &str) -> Result<Vec<ChainRecord>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("line {}: expected 7 fields", k + 1)));
        }
        let flag = |s: &str| match s.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Format(format!("line {}: bad flag {other:?}", k + 1))),
        };
        out.push(ChainRecord {
            iteration: f[0].trim().parse().map_err(|_| Error::Format(format!("line {}: bad iteration", k + 1)))?,
            alpha: parse_f64(f[1], k + 1)?,
            sigma: parse_f64(f[2], k + 1)?,
            log_likelihood: parse_f64(f[3], k + 1)?,
            log_posterior: parse_f64(f[4], k + 1)?,
            accept_innovations: flag(f[5])?,
            accept_parameters: flag(f[6])?,
        });
    }
    Ok(out)
}
