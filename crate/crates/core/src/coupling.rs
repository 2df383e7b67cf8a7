//! Inputs, the metric on input space, and replica coupling weights.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::TimeGrid;
use crate::error::{EmuError, Result};

/// Static parameters plus a piecewise-constant forcing series, one entry per
/// grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTrajectory {
    pub params: Vec<f64>,
    pub forcing: Vec<Vec<f64>>,
    pub grid_id: u64,
}

impl InputTrajectory {
    pub fn new(params: Vec<f64>, forcing: Vec<Vec<f64>>, grid: &TimeGrid) -> Result<Self> {
        if forcing.len() != grid.n_intervals() {
            return Err(EmuError::DimensionMismatch(format!(
                "forcing has {} entries, grid has {} intervals",
                forcing.len(),
                grid.n_intervals()
            )));
        }
        if params.iter().chain(forcing.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(EmuError::InvalidInput("input contains non-finite values".into()));
        }
        Ok(InputTrajectory {
            params,
            forcing,
            grid_id: grid.id(),
        })
    }

    /// Same forcing, different static parameters.
    pub fn with_params(&self, params: Vec<f64>) -> Self {
        InputTrajectory {
            params,
            forcing: self.forcing.clone(),
            grid_id: self.grid_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlavor {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

/// Scaled distance on a subset of the static parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub coords: Vec<usize>,
    pub scales: Vec<f64>,
    #[serde(default)]
    pub flavor: MetricFlavor,
}

impl MetricSpec {
    pub fn new(coords: Vec<usize>, scales: Vec<f64>, flavor: MetricFlavor) -> Result<Self> {
        let spec = MetricSpec {
            coords,
            scales,
            flavor,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.scales.len() {
            return Err(EmuError::InvalidInput(format!(
                "metric has {} coordinates but {} scales",
                self.coords.len(),
                self.scales.len()
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(EmuError::InvalidInput(format!("metric scale {s} is not positive")));
        }
        let mut seen = self.coords.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(EmuError::InvalidInput("metric coordinates repeat".into()));
        }
        Ok(())
    }
}

/// The inputs of the design runs the emulator is conditioned on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DesignSet {
    pub inputs: Vec<InputTrajectory>,
}

impl DesignSet {
    pub fn new(inputs: Vec<InputTrajectory>) -> Result<Self> {
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.grid_id != first.grid_id) {
                return Err(EmuError::MismatchedGrids);
            }
        }
        Ok(DesignSet { inputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Checks that every design shares `x`'s forcing series.
    pub fn check_shared_forcing(&self, x: &InputTrajectory) -> Result<()> {
        if self.inputs.iter().any(|d| d.forcing != x.forcing) {
            return Err(EmuError::InvalidInput(
                "model declares shared forcing but forcing series differ".into(),
            ));
        }
        Ok(())
    }
}

pub fn rho(x_a: &InputTrajectory, x_b: &InputTrajectory, ms: &MetricSpec) -> Result<f64> {
    if x_a.grid_id != x_b.grid_id {
        return Err(EmuError::MismatchedGrids);
    }
    let mut sq = 0.0;
    for (&c, &s) in ms.coords.iter().zip(&ms.scales) {
        let (pa, pb) = match (x_a.params.get(c), x_b.params.get(c)) {
            (Some(a), Some(b)) => (*a, *b),
            _ => {
                return Err(EmuError::DimensionMismatch(format!(
                    "metric coordinate {c} out of range for {} parameters",
                    x_a.params.len().min(x_b.params.len())
                )))
            }
        };
        let d = (pa - pb) / s;
        sq += d * d;
    }
    Ok(match ms.flavor {
        MetricFlavor::SquaredEuclidean => sq,
        MetricFlavor::Euclidean => sq.sqrt(),
    })
}

/// `w = exp(-ρ/2)`; the noise blocks carry `w²`.
pub fn coupling_weight(x_a: &InputTrajectory, x_b: &InputTrajectory, ms: &MetricSpec) -> Result<f64> {
    Ok((-0.5 * rho(x_a, x_b, ms)?).exp())
}

/// Weights between all design replicas, with the online replica appended
/// as the last row and column when given.
pub fn coupling_matrix(
    design: &DesignSet,
    online: Option<&InputTrajectory>,
    ms: &MetricSpec,
) -> Result<DMatrix<f64>> {
    let all: Vec<&InputTrajectory> = design.inputs.iter().chain(online).collect();
    let n = all.len();
    let mut r = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let w = coupling_weight(all[i], all[j], ms)?;
            r[(i, j)] = w;
            r[(j, i)] = w;
        }
    }
    Ok(r)
}
