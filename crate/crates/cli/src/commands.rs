//! One function per subcommand. Each `cmd_*` reads and writes files; the
//! functions they are built from return plain values so tests can call them
//! without touching the filesystem.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dynemu_core::artifact::{self, ArtifactMeta};
use dynemu_core::conditioner::condition_with_stats;
use dynemu_core::logspm::{SyntheticForcing, PARAM_NAMES};
use dynemu_core::simulator::integrate_ode;
use dynemu_core::{
    condition, d_value, emulate, emulate_mean, ConditionedEmulator, DesignSet, InputTrajectory, ObservationSet,
    SimulationModel, TimeGrid,
};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{self, Loaded};
use crate::files::{self, fmt, CsvOut, DesignsFile, Provenance, Sampling};
use crate::{CliError, CliResult};

pub const OBS_NAMES: [&str; 1] = ["q_r"];
pub const STATE_NAMES: [&str; 3] = ["h_s", "h_gw", "h_r"];

// ---------------------------------------------------------------- design

/// `n` parameter sets inside `ranges`, uniform per coordinate or Latin hypercube.
pub fn sample_params(ranges: &[(f64, f64)], n: usize, seed: u64, sampling: Sampling) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit: Vec<Vec<f64>> = match sampling {
        Sampling::Uniform => (0..n).map(|_| ranges.iter().map(|_| rng.random::<f64>()).collect()).collect(),
        Sampling::Lhs => {
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(ranges.len());
            for _ in ranges {
                let mut strata: Vec<usize> = (0..n).collect();
                strata.shuffle(&mut rng);
                cols.push(strata.iter().map(|&s| (s as f64 + rng.random::<f64>()) / n as f64).collect());
            }
            (0..n).map(|a| cols.iter().map(|c| c[a]).collect()).collect()
        }
    };
    unit.into_iter()
        .map(|u| ranges.iter().zip(u).map(|(&(lo, hi), t)| if lo == hi { lo } else { lo + (hi - lo) * t }).collect())
        .collect()
}

pub fn design(cfg: &Loaded, n: usize, seed: u64, sampling: Sampling) -> DesignsFile {
    DesignsFile {
        provenance: Provenance::new(&cfg.hash, &[("design", seed)]),
        sampling,
        param_names: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        sets: sample_params(&cfg.ranges, n, seed, sampling),
    }
}

pub fn cmd_design(config: &Path, n: usize, seed: Option<u64>, sampling: Sampling, out: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = config::load(config)?;
    let seed = seed.unwrap_or(cfg.run.seeds.design);
    let out = cfg.output(out, &cfg.run.outputs.designs, "designs")?;
    files::write_json(&out, &design(&cfg, n, seed, sampling))?;
    Ok(out)
}

pub fn read_designs(path: &Path) -> CliResult<DesignsFile> {
    let d: DesignsFile = files::read_json(path, "designs")?;
    if d.param_names != PARAM_NAMES {
        return Err(CliError::Config(format!("{}: parameter names do not match the model", path.display())));
    }
    if let Some(bad) = d.sets.iter().find(|s| s.len() != PARAM_NAMES.len()) {
        return Err(CliError::Config(format!("{}: a parameter set has {} entries", path.display(), bad.len())));
    }
    Ok(d)
}

pub fn inputs(grid: &TimeGrid, forcing: &[Vec<f64>], sets: &[Vec<f64>]) -> CliResult<DesignSet> {
    let inputs = sets
        .iter()
        .map(|p| InputTrajectory::new(p.clone(), forcing.to_vec(), grid))
        .collect::<dynemu_core::Result<Vec<_>>>()?;
    Ok(DesignSet::new(inputs)?)
}

// ---------------------------------------------------------------- simulate

/// Full-model states and observed outputs for every input.
pub fn simulate_all(
    cfg: &Loaded,
    grid: &TimeGrid,
    design: &DesignSet,
) -> CliResult<(Vec<Vec<DVector<f64>>>, Vec<Vec<DVector<f64>>>)> {
    let xi0 = cfg.xi0();
    let mut observed = Vec::with_capacity(design.len());
    let mut states = Vec::with_capacity(design.len());
    for x in &design.inputs {
        let s = integrate_ode(&cfg.model, x, grid, &xi0, cfg.run.substeps)?;
        let h = cfg.model.observation(&x.params);
        observed.push(s.iter().map(|v| &h * v).collect());
        states.push(s);
    }
    Ok((observed, states))
}

pub fn cmd_simulate(config: &Path, designs: &Path, out: Option<&Path>, full_state: bool) -> CliResult<PathBuf> {
    let cfg = config::load(config)?;
    let d = read_designs(designs)?;
    let set = inputs(&cfg.grid, &cfg.forcing, &d.sets)?;
    let (observed, states) = simulate_all(&cfg, &cfg.grid, &set)?;
    let prov = Provenance::new(&cfg.hash, &seeds_of(&d.provenance));
    let bytes = files::runs_csv(
        &prov,
        cfg.grid.times(),
        &OBS_NAMES,
        &observed,
        full_state.then_some(states.as_slice()),
        &STATE_NAMES,
    )?;
    let out = cfg.output(out, &cfg.run.outputs.runs, "runs")?;
    files::write_bytes(&out, &bytes)?;
    Ok(out)
}

fn seeds_of(p: &Provenance) -> Vec<(&str, u64)> {
    p.seeds.iter().map(|(k, v)| (k.as_str(), *v)).collect()
}

// ---------------------------------------------------------------- condition

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub provenance: Provenance,
    pub n_design: usize,
    pub n_times: usize,
    pub n_cond_times: usize,
    pub obs_dim: usize,
    /// Dimension of `Σ′`: conditioning times × designs × observed outputs.
    pub sigma_dim: usize,
    pub jitter: f64,
    pub jitter_relative: f64,
    pub assembly_seconds: f64,
    pub factorization_seconds: f64,
    pub artifact: PathBuf,
    pub checksum: String,
}

pub fn cmd_condition(
    config: &Path,
    designs: &Path,
    runs: &Path,
    artifact_out: Option<&Path>,
    report_out: Option<&Path>,
) -> CliResult<ConditionReport> {
    let cfg = config::load(config)?;
    let d = read_designs(designs)?;
    let set = inputs(&cfg.grid, &cfg.forcing, &d.sets)?;
    let bytes = std::fs::read(runs).map_err(|e| CliError::io(format!("reading runs {}", runs.display()), e))?;
    let obs = files::parse_runs(&bytes, &cfg.grid, OBS_NAMES.len())
        .map_err(|e| CliError::Config(format!("{}: {e}", runs.display())))?;
    if obs.n_replicas() != set.len() {
        return Err(CliError::Config(format!(
            "{} designs but {} replicas in the runs file",
            set.len(),
            obs.n_replicas()
        )));
    }
    let cc = cfg.condition_config()?;
    let (ce, stats) = condition_with_stats(&cfg.model, &set, &obs, &cfg.grid, &cc)?;

    let path = cfg.output(artifact_out, &cfg.run.outputs.artifact, "artifact")?;
    let seeds = seeds_of(&d.provenance);
    let meta = ArtifactMeta {
        format_version: artifact::FORMAT_VERSION,
        model_id: cfg.model.id().to_string(),
        tool_version: crate::TOOL_VERSION.to_string(),
        metric: ce.metric.clone(),
        sigma_dim: 0,
        jitter: 0.0,
        seeds: d.provenance.seeds.clone(),
        config_hash: Some(cfg.hash.clone()),
        checksum: String::new(),
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    let meta = artifact::save(&path, &ce, &meta)?;
    let report = ConditionReport {
        provenance: Provenance::new(&cfg.hash, &seeds),
        n_design: ce.n_design(),
        n_times: cfg.grid.times().len(),
        n_cond_times: ce.cond_times.len(),
        obs_dim: ce.obs_dim(),
        sigma_dim: stats.sigma_dim,
        jitter: stats.jitter,
        jitter_relative: stats.jitter_relative,
        assembly_seconds: stats.assembly.as_secs_f64(),
        factorization_seconds: stats.factorization.as_secs_f64(),
        artifact: path.clone(),
        checksum: meta.checksum,
    };
    let report_path = report_out.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(&path, ".report.json"));
    files::write_json(&report_path, &report)?;
    Ok(report)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Loads an artifact and checks it was conditioned under this configuration.
pub fn load_artifact(cfg: &Loaded, path: &Path) -> CliResult<(ConditionedEmulator, ArtifactMeta)> {
    let (ce, meta) = artifact::load(path)?;
    let meta = meta.ok_or_else(|| {
        CliError::Config(format!("{}: sidecar {} is missing", path.display(), artifact::sidecar_path(path).display()))
    })?;
    if meta.model_id != cfg.model.id() {
        return Err(CliError::Config(format!("artifact is for model '{}'", meta.model_id)));
    }
    if meta.config_hash.as_deref() != Some(cfg.hash.as_str()) {
        return Err(CliError::Config(format!(
            "{} was conditioned under a different configuration",
            path.display()
        )));
    }
    Ok((ce, meta))
}

// ---------------------------------------------------------------- emulate

/// `--params`: a designs file, or one comma-separated parameter set.
pub fn parse_params(arg: &str) -> CliResult<Vec<Vec<f64>>> {
    let path = Path::new(arg);
    if path.exists() {
        return Ok(read_designs(path)?.sets);
    }
    let set: Vec<f64> = arg
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Config(format!("--params '{arg}' is neither a file nor a comma-separated list")))?;
    if set.len() != PARAM_NAMES.len() {
        return Err(CliError::Config(format!("--params needs {} values, got {}", PARAM_NAMES.len(), set.len())));
    }
    Ok(vec![set])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationTiming {
    pub provenance: Provenance,
    pub n_sets: usize,
    pub with_variance: bool,
    /// Wall-clock of the emulation step per set, conditioning excluded.
    pub seconds: Vec<f64>,
}

pub fn cmd_emulate(
    config: &Path,
    artifact_path: &Path,
    params: &str,
    with_variance: bool,
    out: Option<&Path>,
) -> CliResult<PathBuf> {
    let cfg = config::load(config)?;
    let (ce, meta) = load_artifact(&cfg, artifact_path)?;
    let sets = parse_params(params)?;
    let prov = Provenance::new(&cfg.hash, &seeds_of_meta(&meta));

    let mut header = vec!["time".to_string(), "set".to_string()];
    header.extend(OBS_NAMES.iter().map(|n| format!("mean_{n}")));
    if with_variance {
        header.extend(OBS_NAMES.iter().map(|n| format!("var_{n}")));
    }
    let mut csv = CsvOut::new(&prov, &header)?;
    let mut seconds = Vec::with_capacity(sets.len());
    for (s, p) in sets.iter().enumerate() {
        let x = ce.design.inputs.first().map_or_else(
            || InputTrajectory::new(p.clone(), cfg.forcing.clone(), &cfg.grid),
            |x0| Ok(x0.with_params(p.clone())),
        )?;
        let res = emulate(&ce, &cfg.model, &x, with_variance)?;
        seconds.push(res.elapsed.as_secs_f64());
        for (i, t) in res.times.iter().enumerate() {
            let mut row = vec![fmt(*t), s.to_string()];
            row.extend(res.mean[i].iter().map(|v| fmt(*v)));
            if let Some(var) = &res.variance {
                row.extend(var[i].diagonal().iter().map(|v| fmt(*v)));
            }
            csv.row(&row)?;
        }
    }
    let out = cfg.output(out, &cfg.run.outputs.emulation, "emulation")?;
    files::write_bytes(&out, &csv.finish()?)?;
    let timing = EmulationTiming {
        provenance: prov,
        n_sets: sets.len(),
        with_variance,
        seconds,
    };
    files::write_json(&with_suffix(&out, ".timing.json"), &timing)?;
    Ok(out)
}

fn seeds_of_meta(meta: &ArtifactMeta) -> Vec<(&str, u64)> {
    meta.seeds.iter().map(|(k, v)| (k.as_str(), *v)).collect()
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub index: usize,
    pub params: Vec<f64>,
    pub d_value: f64,
    /// Same comparison for the unconditioned emulator (no design runs).
    pub prior_d_value: f64,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub n_sets: usize,
    pub all_finite: bool,
    pub median_d_value: f64,
    pub median_prior_d_value: f64,
    pub mean_d_value: f64,
    pub max_d_value: f64,
    /// Median conditioned d-value below the median prior d-value.
    pub improves_on_prior: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub provenance: Provenance,
    pub n_design: usize,
    pub sets: Vec<SetResult>,
    pub summary: ValidationSummary,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Per-set comparison of full model, conditioned emulator and prior; the
/// returned CSV bodies are keyed by file name.
pub fn validate(
    cfg: &Loaded,
    ce: &ConditionedEmulator,
    heldout: &[Vec<f64>],
    provenance: &Provenance,
) -> CliResult<(ValidationReport, Vec<(String, Vec<u8>)>)> {
    let cc = cfg.condition_config()?;
    let prior = condition(&cfg.model, &DesignSet::default(), &ObservationSet::new(vec![])?, &cfg.grid, &cc)?;
    let set = inputs(&cfg.grid, &cfg.forcing, heldout)?;
    let (truth, _) = simulate_all(cfg, &cfg.grid, &set)?;

    let mut sets = Vec::with_capacity(heldout.len());
    let mut csvs = Vec::with_capacity(heldout.len());
    for (k, x) in set.inputs.iter().enumerate() {
        let res = emulate(ce, &cfg.model, x, true)?;
        let base = emulate_mean(&prior, &cfg.model, x)?;
        let d = d_value(&res.mean, &truth[k])?;
        let d_prior = d_value(&base.mean, &truth[k])?;

        let mut header = vec!["time".to_string()];
        for n in OBS_NAMES {
            header.extend([format!("truth_{n}"), format!("emulated_{n}"), format!("sd_{n}"), format!("prior_{n}")]);
        }
        header.push("rain".into());
        let mut csv = CsvOut::new(provenance, &header)?;
        let n_int = cfg.grid.n_intervals();
        let var = res.variance.as_ref().expect("variance requested");
        for (i, t) in res.times.iter().enumerate() {
            let mut row = vec![fmt(*t)];
            for c in 0..OBS_NAMES.len() {
                row.extend([
                    fmt(truth[k][i][c]),
                    fmt(res.mean[i][c]),
                    fmt(var[i][(c, c)].max(0.0).sqrt()),
                    fmt(base.mean[i][c]),
                ]);
            }
            // rain over the interval starting at this time; the last point repeats the final interval
            row.push(fmt(x.forcing[i.min(n_int - 1)][0]));
            csv.row(&row)?;
        }
        let name = format!("set_{k}.csv");
        csvs.push((name.clone(), csv.finish()?));
        sets.push(SetResult {
            index: k,
            params: x.params.clone(),
            d_value: d,
            prior_d_value: d_prior,
            csv: name,
        });
    }
    let ds: Vec<f64> = sets.iter().map(|s| s.d_value).collect();
    let priors: Vec<f64> = sets.iter().map(|s| s.prior_d_value).collect();
    let all_finite = ds.iter().chain(&priors).all(|v| v.is_finite());
    let summary = ValidationSummary {
        n_sets: sets.len(),
        all_finite,
        median_d_value: median(&ds),
        median_prior_d_value: median(&priors),
        mean_d_value: ds.iter().sum::<f64>() / ds.len().max(1) as f64,
        max_d_value: ds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        improves_on_prior: all_finite && median(&ds) < median(&priors),
    };
    Ok((
        ValidationReport {
            provenance: provenance.clone(),
            n_design: ce.n_design(),
            sets,
            summary,
        },
        csvs,
    ))
}

pub fn cmd_validate(
    config: &Path,
    artifact_path: &Path,
    params: Option<&str>,
    n: usize,
    seed: Option<u64>,
    out: Option<&Path>,
) -> CliResult<ValidationReport> {
    let cfg = config::load(config)?;
    let (ce, meta) = load_artifact(&cfg, artifact_path)?;
    let seed = seed.unwrap_or(cfg.run.seeds.heldout);
    let mut seeds = seeds_of_meta(&meta);
    let heldout = match params {
        Some(p) => parse_params(p)?,
        None => {
            seeds.push(("heldout", seed));
            sample_params(&cfg.ranges, n, seed, Sampling::Uniform)
        }
    };
    let prov = Provenance::new(&cfg.hash, &seeds);
    let (report, csvs) = validate(&cfg, &ce, &heldout, &prov)?;
    let dir = cfg.output(out, &cfg.run.outputs.validation, "validation")?;
    for (name, bytes) in csvs {
        files::write_bytes(&dir.join(name), &bytes)?;
    }
    files::write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    /// Grid lengths for the sweep over N, at `fixed_n` designs.
    pub n_steps: Vec<usize>,
    /// Design counts for the sweep over n, at `fixed_n_steps` intervals.
    pub n_designs: Vec<usize>,
    pub fixed_n: usize,
    pub fixed_n_steps: usize,
    /// Timed repetitions per point; the fastest is kept.
    pub reps: usize,
    /// Online inputs emulated per repetition.
    pub inputs: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            n_steps: vec![20, 36, 63, 112, 200],
            n_designs: vec![5, 9, 16, 28, 50],
            fixed_n: 20,
            fixed_n_steps: 200,
            reps: 20,
            inputs: 8,
        }
    }
}

impl BenchSpec {
    /// `N=20,50,200;n=5,10,50;fixed_n=20;fixed_N=200;reps=5;inputs=4`, any subset.
    pub fn parse(s: &str) -> CliResult<Self> {
        let mut spec = BenchSpec::default();
        let bad = |what: &str| CliError::Config(format!("--sweep: bad {what} in '{s}'"));
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, val) = part.split_once('=').ok_or_else(|| bad("entry"))?;
            let list = || -> CliResult<Vec<usize>> {
                val.split(',').map(|v| v.trim().parse::<usize>().map_err(|_| bad(key))).collect()
            };
            let one = || -> CliResult<usize> { val.trim().parse::<usize>().map_err(|_| bad(key)) };
            match key.trim() {
                "N" => spec.n_steps = list()?,
                "n" => spec.n_designs = list()?,
                "fixed_n" => spec.fixed_n = one()?,
                "fixed_N" => spec.fixed_n_steps = one()?,
                "reps" => spec.reps = one()?,
                "inputs" => spec.inputs = one()?,
                _ => return Err(bad("key")),
            }
        }
        if spec.reps == 0
            || spec.inputs == 0
            || spec.fixed_n == 0
            || spec.fixed_n_steps == 0
            || spec.n_steps.iter().chain(&spec.n_designs).any(|v| *v == 0)
        {
            return Err(CliError::Config("--sweep values must be positive".into()));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub axis: String,
    pub n_steps: usize,
    pub n_design: usize,
    /// Fastest repetition, divided by the number of online inputs.
    pub seconds: f64,
    pub condition_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub provenance: Provenance,
    pub spec: BenchSpec,
    pub points: Vec<BenchPoint>,
    pub slope_vs_n_steps: f64,
    pub slope_vs_n_design: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Uniform grid with the configured step and a forcing series of matching
/// length, synthetic when the model config carries generator settings.
fn bench_forcing(cfg: &Loaded, n_steps: usize) -> CliResult<(TimeGrid, Vec<Vec<f64>>)> {
    let times = cfg.grid.times();
    let dt = times[1] - times[0];
    let grid = TimeGrid::uniform(times[0], dt, n_steps)?;
    let forcing = match &cfg.model_cfg.synthetic_forcing {
        Some(s) => s.settings.generate(grid.times(), s.seed)?,
        None => (0..n_steps).map(|i| cfg.forcing[i % cfg.forcing.len()].clone()).collect(),
    };
    Ok((grid, forcing))
}

struct Prepared {
    point: BenchPoint,
    ce: ConditionedEmulator,
    online: DesignSet,
}

fn prepare_point(cfg: &Loaded, spec: &BenchSpec, axis: &str, n_steps: usize, n: usize, seed: u64) -> CliResult<Prepared> {
    let (grid, forcing) = bench_forcing(cfg, n_steps)?;
    let sets = sample_params(&cfg.ranges, n + spec.inputs, seed, Sampling::Uniform);
    let design = inputs(&grid, &forcing, &sets[..n])?;
    let online = inputs(&grid, &forcing, &sets[n..])?;
    let (observed, _) = simulate_all(cfg, &grid, &design)?;
    let cc = cfg.condition_config()?;
    let start = Instant::now();
    let ce = condition(&cfg.model, &design, &ObservationSet::new(observed)?, &grid, &cc)?;
    let condition_seconds = start.elapsed().as_secs_f64();
    Ok(Prepared {
        point: BenchPoint {
            axis: axis.to_string(),
            n_steps,
            n_design: n,
            seconds: f64::INFINITY,
            condition_seconds,
        },
        ce,
        online,
    })
}

/// Conditions every point first, then times the emulation step in
/// interleaved rounds so slow drift in machine load hits all points alike.
pub fn bench(cfg: &Loaded, spec: &BenchSpec, seed: u64) -> CliResult<BenchReport> {
    let mut prepared = Vec::new();
    for &n_steps in &spec.n_steps {
        prepared.push(prepare_point(cfg, spec, "N", n_steps, spec.fixed_n, seed)?);
    }
    for &n in &spec.n_designs {
        prepared.push(prepare_point(cfg, spec, "n", spec.fixed_n_steps, n, seed)?);
    }
    for _ in 0..spec.reps {
        for p in &mut prepared {
            let start = Instant::now();
            for x in &p.online.inputs {
                std::hint::black_box(emulate_mean(&p.ce, &cfg.model, x)?);
            }
            let per_input = start.elapsed().as_secs_f64() / spec.inputs as f64;
            p.point.seconds = p.point.seconds.min(per_input);
        }
    }
    let points: Vec<BenchPoint> = prepared.into_iter().map(|p| p.point).collect();
    let slope = |axis: &str, key: fn(&BenchPoint) -> usize| {
        let pts: Vec<&BenchPoint> = points.iter().filter(|p| p.axis == axis).collect();
        let x: Vec<f64> = pts.iter().map(|p| key(p) as f64).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.seconds).collect();
        if x.len() < 2 {
            f64::NAN
        } else {
            loglog_slope(&x, &y)
        }
    };
    let slope_vs_n_steps = slope("N", |p| p.n_steps);
    let slope_vs_n_design = slope("n", |p| p.n_design);
    Ok(BenchReport {
        provenance: Provenance::new(&cfg.hash, &[("bench", seed)]),
        spec: spec.clone(),
        points,
        slope_vs_n_steps,
        slope_vs_n_design,
    })
}

pub fn cmd_bench(config: &Path, sweep: Option<&str>, seed: Option<u64>, out: Option<&Path>) -> CliResult<BenchReport> {
    let cfg = config::load(config)?;
    let spec = match sweep {
        Some(s) => BenchSpec::parse(s)?,
        None => BenchSpec::default(),
    };
    let seed = seed.unwrap_or(cfg.run.seeds.bench);
    let report = bench(&cfg, &spec, seed)?;
    let dir = cfg.output(out, &cfg.run.outputs.bench, "bench")?;
    let header: Vec<String> = ["axis", "n_steps", "n_design", "emulate_seconds", "condition_seconds"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut csv = CsvOut::new(&report.provenance, &header)?;
    for p in &report.points {
        csv.row(&[
            p.axis.clone(),
            p.n_steps.to_string(),
            p.n_design.to_string(),
            fmt(p.seconds),
            fmt(p.condition_seconds),
        ])?;
    }
    files::write_bytes(&dir.join("bench.csv"), &csv.finish()?)?;
    files::write_json(&dir.join("bench.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- forcing, pilot

/// Writes a synthetic forcing CSV for `n_steps` intervals of the configured grid step.
pub fn cmd_forcing(
    config: &Path,
    settings: Option<SyntheticForcing>,
    n_steps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<PathBuf> {
    let bytes = std::fs::read(config).map_err(|e| CliError::io(format!("reading {}", config.display()), e))?;
    let run: config::RunConfig =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let model_cfg: config::LogSpmConfig = files::read_json(&base.join(&run.model_config), "model config")?;
    let synth = model_cfg.synthetic_forcing.clone();
    let settings = settings
        .or(synth.as_ref().map(|s| s.settings))
        .ok_or_else(|| CliError::Config("model config has no synthetic_forcing settings".into()))?;
    let seed = seed.or(synth.map(|s| s.seed)).unwrap_or(0);
    let full = run.grid.build()?;
    let n_steps = n_steps.unwrap_or(full.n_intervals());
    let dt = full.times()[1] - full.times()[0];
    let grid = TimeGrid::uniform(full.times()[0], dt, n_steps)?;
    let forcing = settings.generate(grid.times(), seed)?;
    let prov = Provenance::new(&format!("{:x}", Sha256::digest(&bytes)), &[("forcing", seed)]);
    files::write_bytes(out, &files::forcing_csv(&prov, grid.times(), &forcing)?)?;
    Ok(out.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub params: Vec<f64>,
    pub h_s_median: f64,
    pub h_s_min: f64,
    pub h_s_max: f64,
    pub q_r_max: f64,
}

/// Mid-range run over the configured grid; its median soil storage is the
/// suggested linearization point for `h_s1` and `h_s2`.
pub fn pilot(cfg: &Loaded) -> CliResult<PilotReport> {
    let params: Vec<f64> = cfg.ranges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let set = inputs(&cfg.grid, &cfg.forcing, std::slice::from_ref(&params))?;
    let (observed, states) = simulate_all(cfg, &cfg.grid, &set)?;
    let h_s: Vec<f64> = states[0].iter().map(|s| s[0]).collect();
    Ok(PilotReport {
        params,
        h_s_median: median(&h_s),
        h_s_min: h_s.iter().copied().fold(f64::INFINITY, f64::min),
        h_s_max: h_s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        q_r_max: observed[0].iter().map(|y| y[0]).fold(f64::NEG_INFINITY, f64::max),
    })
}
