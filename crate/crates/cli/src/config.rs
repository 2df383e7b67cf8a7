//! Run configuration and the logSPM model configuration it points to.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dynemu_core::conditioner::DEFAULT_JITTER_SCHEDULE;
use dynemu_core::kernels::DEFAULT_COND_THRESHOLD;
use dynemu_core::logspm::{default_metric, noise_spec, SyntheticForcing, PARAM_NAMES};
use dynemu_core::simulator::DEFAULT_SUBSTEPS;
use dynemu_core::{ConditionConfig, LogSpm, MetricFlavor, TimeGrid};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Uniform { t0: f64, dt: f64, n_steps: usize },
    Explicit { times: Vec<f64> },
}

impl GridSpec {
    pub fn build(&self) -> CliResult<TimeGrid> {
        let grid = match self {
            GridSpec::Uniform { t0, dt, n_steps } => TimeGrid::uniform(*t0, *dt, *n_steps),
            GridSpec::Explicit { times } => TimeGrid::new(times.clone()),
        };
        grid.map_err(|e| CliError::Config(format!("grid: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub design: u64,
    #[serde(default = "default_heldout_seed")]
    pub heldout: u64,
    #[serde(default = "default_bench_seed")]
    pub bench: u64,
}

fn default_heldout_seed() -> u64 {
    1001
}

fn default_bench_seed() -> u64 {
    2002
}

/// Default output locations, used when the matching flag is absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub designs: Option<PathBuf>,
    pub runs: Option<PathBuf>,
    pub artifact: Option<PathBuf>,
    pub emulation: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub bench: Option<PathBuf>,
}

fn default_jitter() -> Vec<f64> {
    DEFAULT_JITTER_SCHEDULE.to_vec()
}

fn default_stride() -> usize {
    1
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

fn default_cond_threshold() -> f64 {
    DEFAULT_COND_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    pub grid: GridSpec,
    /// CSV with columns `t, i_rain, i_pet`, one row per grid interval.
    pub forcing: PathBuf,
    /// Parameter ranges, initial state, noise fraction, linearization points.
    pub model_config: PathBuf,
    #[serde(default)]
    pub seeds: Seeds,
    /// Overrides the model configuration's noise fraction.
    #[serde(default)]
    pub noise_frac: Option<f64>,
    #[serde(default)]
    pub metric_flavor: MetricFlavor,
    #[serde(default = "default_jitter")]
    pub jitter_schedule: Vec<f64>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_cond_threshold")]
    pub cond_threshold: f64,
    #[serde(default)]
    pub outputs: Outputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogSpmConfig {
    /// `(low, high)` per parameter name.
    pub ranges: BTreeMap<String, (f64, f64)>,
    pub xi0: [f64; 3],
    pub noise_frac: f64,
    pub h_s1: f64,
    pub h_s2: f64,
    #[serde(default = "default_area")]
    pub area: f64,
    /// Generator settings behind the shipped forcing file; also used for
    /// longer synthetic series in benchmarks.
    pub synthetic_forcing: Option<SyntheticForcingConfig>,
}

fn default_area() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticForcingConfig {
    #[serde(flatten)]
    pub settings: SyntheticForcing,
    pub seed: u64,
}

impl LogSpmConfig {
    /// Ranges in the model's parameter order.
    pub fn ordered_ranges(&self) -> CliResult<Vec<(f64, f64)>> {
        if let Some(extra) = self.ranges.keys().find(|k| !PARAM_NAMES.contains(&k.as_str())) {
            return Err(CliError::Config(format!("unknown parameter '{extra}' in ranges")));
        }
        PARAM_NAMES
            .iter()
            .map(|name| {
                let &(lo, hi) = self
                    .ranges
                    .get(*name)
                    .ok_or_else(|| CliError::Config(format!("missing range for '{name}'")))?;
                if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                    return Err(CliError::Config(format!("invalid range [{lo}, {hi}] for '{name}'")));
                }
                Ok((lo, hi))
            })
            .collect()
    }
}

/// Everything a command needs, resolved and validated.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub path: PathBuf,
    pub run: RunConfig,
    pub model_cfg: LogSpmConfig,
    pub model: LogSpm,
    pub grid: TimeGrid,
    pub ranges: Vec<(f64, f64)>,
    pub forcing: Vec<Vec<f64>>,
    /// SHA-256 over the run config, model config and forcing file bytes.
    pub hash: String,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_referenced(path: &Path, what: &str) -> CliResult<Vec<u8>> {
    if !path.exists() {
        return Err(CliError::Config(format!("{what} file {} does not exist", path.display())));
    }
    fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

pub fn load(path: &Path) -> CliResult<Loaded> {
    let run_bytes = read_referenced(path, "config")?;
    let run: RunConfig = serde_json::from_slice(&run_bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if run.model != "logspm" {
        return Err(CliError::Config(format!("unknown model '{}'", run.model)));
    }
    if run.stride == 0 || run.substeps == 0 {
        return Err(CliError::Config("stride and substeps must be at least 1".into()));
    }
    if run.jitter_schedule.is_empty() || run.jitter_schedule.iter().any(|j| !(*j >= 0.0 && j.is_finite())) {
        return Err(CliError::Config("jitter schedule must be nonempty and nonnegative".into()));
    }
    let base = path.parent().unwrap_or(Path::new("."));

    let model_path = resolve(base, &run.model_config);
    let model_bytes = read_referenced(&model_path, "model config")?;
    let model_cfg: LogSpmConfig = serde_json::from_slice(&model_bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", model_path.display())))?;
    let ranges = model_cfg.ordered_ranges()?;
    let model = LogSpm::new(model_cfg.area, model_cfg.h_s1, model_cfg.h_s2)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let grid = run.grid.build()?;
    let forcing_path = resolve(base, &run.forcing);
    let forcing_bytes = read_referenced(&forcing_path, "forcing")?;
    let forcing = crate::files::parse_forcing(&forcing_bytes, &grid)
        .map_err(|e| CliError::Config(format!("{}: {e}", forcing_path.display())))?;

    let mut h = Sha256::new();
    for bytes in [&run_bytes, &model_bytes, &forcing_bytes] {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    let hash = format!("{:x}", h.finalize());

    let loaded = Loaded {
        path: path.to_path_buf(),
        run,
        model_cfg,
        model,
        grid,
        ranges,
        forcing,
        hash,
    };
    loaded.condition_config()?;
    Ok(loaded)
}

impl Loaded {
    pub fn xi0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.model_cfg.xi0)
    }

    pub fn noise_frac(&self) -> f64 {
        self.run.noise_frac.unwrap_or(self.model_cfg.noise_frac)
    }

    pub fn condition_config(&self) -> CliResult<ConditionConfig> {
        let xi0 = self.xi0();
        let cct = noise_spec(&xi0, self.noise_frac()).map_err(|e| CliError::Config(e.to_string()))?;
        let mut metric = default_metric(&self.ranges).map_err(|e| CliError::Config(e.to_string()))?;
        metric.flavor = self.run.metric_flavor;
        let mut cfg = ConditionConfig::new(xi0, cct, metric);
        cfg.jitter_schedule = self.run.jitter_schedule.clone();
        cfg.stride = self.run.stride;
        cfg.cond_threshold = self.run.cond_threshold;
        Ok(cfg)
    }

    /// Resolves an output path: explicit flag first, then the config's default.
    pub fn output(&self, flag: Option<&Path>, default: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
        match (flag, default) {
            (Some(p), _) => Ok(p.to_path_buf()),
            (None, Some(p)) => Ok(resolve(self.path.parent().unwrap_or(Path::new(".")), p)),
            (None, None) => Err(CliError::Config(format!("no output path for {what}: pass --out"))),
        }
    }
}
