//! Run configuration: a TOML file, then `--set` overrides, then flags.
//!
//! ```toml
//! seed = 7
//!
//! [kernel]
//! family = "matern"   # or "squared_exponential"
//! c = 3.5
//! alpha = 1.0
//! sigma = 1.0
//! dim = 2
//!
//! [simulate]          # one section per command, see the structs below
//! x0 = "outline.json"
//! ```
//!
//! Relative file names resolve against the directory of the config file
//! (the working directory when there is none). The resolved config written
//! next to the outputs holds absolute paths, so it can be fed back as
//! `--config` to reproduce a run.

use anyhow::{bail, Context, Result};
use kunita::bridges::GuidedScheme;
use kunita::kernels::KernelParams;
use kunita::phylo::{McmcConfig, Priors};
use kunita::processes::Convention;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Exact,
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    Kunita,
    RiemannianBm,
    StochasticEpdiff,
    InnerMomentumNoise,
    Langevin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DelyonHu,
    Guided,
}

/// Grid layout for the quadrature noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    /// Margin around the start configuration, in kernel length scales.
    pub padding: f64,
    /// Node spacing; half the length scale when absent.
    pub spacing: Option<f64>,
    /// Explicit box, overriding `padding`. Both corners must be given.
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self { padding: kunita::noise::DEFAULT_PADDING, spacing: None, lower: None, upper: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub process: Process,
    pub convention: Convention,
    pub x0: PathBuf,
    /// Initial momentum for the momentum variants; zero when absent.
    pub p0: Option<PathBuf>,
    pub horizon: f64,
    pub steps: usize,
    pub backend: Backend,
    pub grid: GridSettings,
    pub n_paths: usize,
    pub noise_scale: f64,
    pub dissipation: f64,
    pub format: Format,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            process: Process::Kunita,
            convention: Convention::Ito,
            x0: PathBuf::new(),
            p0: None,
            horizon: 1.0,
            steps: 100,
            backend: Backend::Exact,
            grid: GridSettings::default(),
            n_paths: 1,
            noise_scale: 1.0,
            dissipation: 0.0,
            format: Format::Csv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    /// Polyline, one vertex per row; repeated vertices are fine.
    pub input: PathBuf,
    pub horizon: f64,
    pub steps: usize,
    /// Frames written, the input included; spread evenly over the steps.
    pub frames: usize,
    pub grid: GridSettings,
    /// Also write the binary noise replay record.
    pub replay: bool,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self { input: PathBuf::new(), horizon: 1.0, steps: 100, frames: 10, grid: GridSettings::default(), replay: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub x0: PathBuf,
    pub target: PathBuf,
    pub horizon: f64,
    pub steps: usize,
    pub method: Method,
    /// Append the target as the last Delyon-Hu row.
    pub clamp: bool,
    pub obs_variance: f64,
    pub scheme: GuidedScheme,
    /// Replace the Kunita diffusion by the constant auxiliary one. A
    /// consistency check: guided weights then vanish.
    pub constant_diffusion: bool,
    pub n_paths: usize,
    pub format: Format,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            x0: PathBuf::new(),
            target: PathBuf::new(),
            horizon: 1.0,
            steps: 100,
            method: Method::Guided,
            clamp: true,
            obs_variance: 0.0,
            scheme: GuidedScheme::Euler,
            constant_diffusion: false,
            n_paths: 1,
            format: Format::Csv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Newick file.
    pub tree: PathBuf,
    /// Root configuration.
    pub root: PathBuf,
    /// Leaf name to observation file.
    pub observations: BTreeMap<String, PathBuf>,
    pub obs_noise: f64,
    pub priors: Priors,
    /// Chain settings; its seed is replaced by the run seed.
    pub mcmc: McmcConfig,
    pub true_alpha: Option<f64>,
    pub true_sigma: Option<f64>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            tree: PathBuf::new(),
            root: PathBuf::new(),
            observations: BTreeMap::new(),
            obs_noise: 0.05,
            priors: Priors::default(),
            mcmc: McmcConfig::default(),
            true_alpha: None,
            true_sigma: None,
        }
    }
}

/// Nothing beyond the kernel.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConfig {}

/// Command sections that name input files.
pub trait Section: Serialize + DeserializeOwned + Default {
    const NAME: &'static str;
    fn inputs(&mut self) -> Vec<&mut PathBuf>;
    /// Hook to copy the run seed into the section.
    fn take_seed(&mut self, _seed: u64) {}
}

impl Section for SimulateConfig {
    const NAME: &'static str = "simulate";
    fn inputs(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.x0];
        v.extend(self.p0.as_mut());
        v
    }
}

impl Section for WarpConfig {
    const NAME: &'static str = "warp";
    fn inputs(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.input]
    }
}

impl Section for BridgeConfig {
    const NAME: &'static str = "bridge";
    fn inputs(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.x0, &mut self.target]
    }
}

impl Section for InferConfig {
    const NAME: &'static str = "infer";
    fn inputs(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.tree, &mut self.root];
        v.extend(self.observations.values_mut());
        v
    }
    fn take_seed(&mut self, seed: u64) {
        self.mcmc.seed = seed;
    }
}

impl Section for VarianceConfig {
    const NAME: &'static str = "variance";
    fn inputs(&mut self) -> Vec<&mut PathBuf> {
        Vec::new()
    }
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig<C> {
    pub seed: u64,
    pub kernel: KernelParams,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub section: C,
}

impl<C: Section> RunConfig<C> {
    /// The config as a TOML table with the command section under its name.
    pub fn to_toml(&self) -> Result<toml::Table> {
        let mut table = toml::Table::try_from(self)?;
        table.insert(C::NAME.into(), toml::Value::try_from(&self.section)?);
        Ok(table)
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        let mut value = serde_json::to_value(self)?;
        value[C::NAME] = serde_json::to_value(&self.section)?;
        Ok(value)
    }
}

/// Sets `key` (dot-separated) in `table`. The value is read as TOML, or
/// taken as a bare string when it does not parse.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override {assignment:?} is not of the form key=value");
    };
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed the key we wrote"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {key}: {p} is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Sections of other commands may share a file and are ignored.
const COMMANDS: [&str; 5] = ["simulate", "warp", "bridge", "infer", "variance"];

pub struct Sources<'a> {
    pub config: Option<&'a Path>,
    pub overrides: &'a [String],
    pub seed: Option<u64>,
    pub out: &'a Path,
}

pub fn load<C: Section>(src: &Sources) -> Result<RunConfig<C>> {
    let (mut table, base) = match src.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let dir = std::path::absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default();
            (table, dir)
        }
        None => (toml::Table::new(), std::env::current_dir()?),
    };
    for o in src.overrides {
        apply_override(&mut table, o)?;
    }
    let seed = match (src.seed, table.remove("seed")) {
        (Some(s), _) => s,
        (None, Some(v)) => v.try_into().context("seed must be a non-negative integer")?,
        (None, None) => 0,
    };
    let kernel: KernelParams = match table.remove("kernel") {
        Some(toml::Value::Table(given)) => {
            // Missing entries come from the default kernel; its family
            // parameters only while the family itself is not given.
            let mut merged = toml::Table::try_from(KernelParams::default())?;
            if given.contains_key("family") {
                merged.retain(|k, _| matches!(&k[..], "alpha" | "sigma" | "dim"));
            }
            merged.extend(given);
            toml::Value::Table(merged).try_into().context("bad [kernel] section")?
        }
        Some(_) => bail!("[kernel] must be a table"),
        None => KernelParams::default(),
    };
    kernel.validate()?;
    let mut section: C = match table.remove(C::NAME) {
        Some(v) => v.try_into().with_context(|| format!("bad [{}] section", C::NAME))?,
        None => C::default(),
    };
    if let Some(key) = table.keys().find(|k| !COMMANDS.contains(&k.as_str())) {
        bail!("unknown config entry {key:?} for the {} command", C::NAME);
    }
    for p in section.inputs() {
        if p.as_os_str().is_empty() {
            bail!("[{}] is missing an input file", C::NAME);
        }
        *p = base.join(&*p);
        if !p.is_file() {
            bail!("input file {} does not exist", p.display());
        }
    }
    section.take_seed(seed);
    Ok(RunConfig { seed, kernel, out: src.out.to_path_buf(), section })
}
