//! On-disk formats: designs JSON, runs / forcing / emulation CSV.
//!
//! CSV files start with one `#` provenance line, then a header row. Floats
//! are written with Rust's shortest round-trip formatting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dynemu_core::{ObservationSet, TimeGrid};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, TOOL_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

impl Provenance {
    pub fn new(config_hash: &str, seeds: &[(&str, u64)]) -> Self {
        Provenance {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn csv_line(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!(
            "# {} config_hash={} seeds={}\n",
            self.tool_version,
            self.config_hash,
            if seeds.is_empty() { "none".to_string() } else { seeds.join(",") }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Uniform,
    Lhs,
}

/// Parameter sets, one row per replica, in the model's parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignsFile {
    pub provenance: Provenance,
    pub sampling: Sampling,
    pub param_names: Vec<String>,
    pub sets: Vec<Vec<f64>>,
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {what} {}", path.display()), e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{what} {}: {e}", path.display())))
}

/// CSV text builder; `csv::Writer` handles quoting, fields are preformatted.
pub struct CsvOut {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvOut {
    pub fn new(provenance: &Provenance, header: &[String]) -> CliResult<Self> {
        let mut buf = Vec::new();
        buf.extend_from_slice(provenance.csv_line().as_bytes());
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(buf);
        writer.write_record(header).map_err(csv_err)?;
        Ok(CsvOut { writer })
    }

    pub fn row(&mut self, fields: &[String]) -> CliResult<()> {
        self.writer.write_record(fields).map_err(csv_err)
    }

    pub fn finish(self) -> CliResult<Vec<u8>> {
        self.writer.into_inner().map_err(|e| CliError::Config(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Config(format!("csv: {e}"))
}

pub fn fmt(x: f64) -> String {
    format!("{x}")
}

fn reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(bytes)
}

fn parse_f64(s: &str, what: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("{what}: '{s}' is not a number"))
}

/// Forcing rows `t, i_rain, i_pet`; the first `n_intervals` rows are used and
/// their `t` must match the interval start times.
pub fn parse_forcing(bytes: &[u8], grid: &TimeGrid) -> Result<Vec<Vec<f64>>, String> {
    let mut rdr = reader(bytes);
    let header: Vec<String> = rdr.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
    if header != ["t", "i_rain", "i_pet"] {
        return Err(format!("expected header t,i_rain,i_pet, got {}", header.join(",")));
    }
    let times = grid.times();
    let mut out = Vec::with_capacity(grid.n_intervals());
    for (row, rec) in rdr.records().enumerate() {
        if row == grid.n_intervals() {
            break;
        }
        let rec = rec.map_err(|e| e.to_string())?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| parse_f64(s, &format!("row {}", row + 1)))
            .collect::<Result<_, _>>()?;
        if vals.len() != 3 {
            return Err(format!("row {} has {} fields", row + 1, vals.len()));
        }
        if (vals[0] - times[row]).abs() > 1e-9 * (1.0 + times[row].abs()) {
            return Err(format!("row {} has t = {} but the grid interval starts at {}", row + 1, vals[0], times[row]));
        }
        if vals[1..].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(format!("row {}: forcing must be finite and nonnegative", row + 1));
        }
        out.push(vals[1..].to_vec());
    }
    if out.len() < grid.n_intervals() {
        return Err(format!("{} forcing rows for {} grid intervals", out.len(), grid.n_intervals()));
    }
    Ok(out)
}

pub fn forcing_csv(provenance: &Provenance, times: &[f64], forcing: &[Vec<f64>]) -> CliResult<Vec<u8>> {
    let mut out = CsvOut::new(provenance, &["t".into(), "i_rain".into(), "i_pet".into()])?;
    for (t, f) in times.iter().zip(forcing) {
        out.row(&[fmt(*t), fmt(f[0]), fmt(f[1])])?;
    }
    out.finish()
}

/// Observed outputs (and optionally full states) of each replica.
pub fn runs_csv(
    provenance: &Provenance,
    times: &[f64],
    obs_names: &[&str],
    observed: &[Vec<DVector<f64>>],
    states: Option<&[Vec<DVector<f64>>]>,
    state_names: &[&str],
) -> CliResult<Vec<u8>> {
    let mut header = vec!["time".to_string(), "replica".to_string()];
    header.extend(obs_names.iter().map(|s| s.to_string()));
    if states.is_some() {
        header.extend(state_names.iter().map(|s| s.to_string()));
    }
    let mut out = CsvOut::new(provenance, &header)?;
    for (a, series) in observed.iter().enumerate() {
        for (i, y) in series.iter().enumerate() {
            let mut fields = vec![fmt(times[i]), a.to_string()];
            fields.extend(y.iter().map(|v| fmt(*v)));
            if let Some(states) = states {
                fields.extend(states[a][i].iter().map(|v| fmt(*v)));
            }
            out.row(&fields)?;
        }
    }
    out.finish()
}

/// Reads a runs CSV back into per-replica observation series; `n_obs`
/// columns after `time, replica` are taken as observed outputs.
pub fn parse_runs(bytes: &[u8], grid: &TimeGrid, n_obs: usize) -> Result<ObservationSet, String> {
    let mut rdr = reader(bytes);
    let header_len = rdr.headers().map_err(|e| e.to_string())?.len();
    if header_len < 2 + n_obs {
        return Err(format!("runs file has {header_len} columns, need at least {}", 2 + n_obs));
    }
    let times = grid.times();
    let mut series: Vec<Vec<DVector<f64>>> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let what = format!("row {}", row + 1);
        let t = parse_f64(&rec[0], &what)?;
        let a: usize = rec[1].parse().map_err(|_| format!("{what}: bad replica index '{}'", &rec[1]))?;
        if a > series.len() {
            return Err(format!("{what}: replica {a} appears before replica {}", series.len()));
        }
        if a == series.len() {
            series.push(Vec::with_capacity(times.len()));
        }
        let i = series[a].len();
        if i >= times.len() || (t - times[i]).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(format!("{what}: time {t} does not match grid point {i} of replica {a}"));
        }
        let y: Vec<f64> = (0..n_obs).map(|c| parse_f64(&rec[2 + c], &what)).collect::<Result<_, _>>()?;
        series[a].push(DVector::from_vec(y));
    }
    for (a, s) in series.iter().enumerate() {
        if s.len() != times.len() {
            return Err(format!("replica {a} has {} rows, grid has {} points", s.len(), times.len()));
        }
    }
    ObservationSet::new(series).map_err(|e| e.to_string())
}
