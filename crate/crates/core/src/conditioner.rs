//! The conditioning phase: everything that does not depend on the input to
//! be emulated is computed here once and kept in a [`ConditionedEmulator`].

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::coupling::{coupling_matrix, DesignSet, MetricSpec};
use crate::covariance::{
    assemble_replica_kernels, mean_recursion, sigma_prime, CovarianceBlocks, MeanTrajectory,
    ReplicaKernels, TimeGrid,
};
use crate::error::{EmuError, Result};
use crate::kernels::DEFAULT_COND_THRESHOLD;
use crate::linalg::{cholesky, CholeskyFactor};
use crate::model::SimulationModel;

/// Jitter levels tried in turn, relative to the mean diagonal of `Σ′`.
pub const DEFAULT_JITTER_SCHEDULE: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Observed outputs `y^a_i` of the design runs, stored per replica for
/// `i = 0..=N`. Index 0 is the shared initial condition and is not conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub series: Vec<Vec<DVector<f64>>>,
}

impl ObservationSet {
    pub fn new(series: Vec<Vec<DVector<f64>>>) -> Result<Self> {
        if let Some(first) = series.first() {
            let len = first.len();
            let dim = first.first().map_or(0, |y| y.len());
            if series.iter().any(|s| s.len() != len || s.iter().any(|y| y.len() != dim)) {
                return Err(EmuError::DimensionMismatch("observation series are ragged".into()));
            }
        }
        if series.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(EmuError::InvalidInput("observations contain non-finite values".into()));
        }
        Ok(ObservationSet { series })
    }

    pub fn n_replicas(&self) -> usize {
        self.series.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionConfig {
    pub xi0: DVector<f64>,
    pub cct: DMatrix<f64>,
    pub metric: MetricSpec,
    pub jitter_schedule: Vec<f64>,
    pub cond_threshold: f64,
    /// Condition on every `stride`-th time point.
    pub stride: usize,
}

impl ConditionConfig {
    pub fn new(xi0: DVector<f64>, cct: DMatrix<f64>, metric: MetricSpec) -> Self {
        ConditionConfig {
            xi0,
            cct,
            metric,
            jitter_schedule: DEFAULT_JITTER_SCHEDULE.to_vec(),
            cond_threshold: DEFAULT_COND_THRESHOLD,
            stride: 1,
        }
    }
}

/// Everything the emulation step needs, fixed once the design runs are known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedEmulator {
    pub grid: TimeGrid,
    pub design: DesignSet,
    pub metric: MetricSpec,
    pub cct: DMatrix<f64>,
    pub xi0: DVector<f64>,
    pub cond_threshold: f64,
    /// Conditioning time indices, all in `1..=N`.
    pub cond_times: Vec<usize>,
    pub chol: CholeskyFactor,
    /// Absolute jitter added to the diagonal of `Σ′` before factorizing.
    pub jitter: f64,
    /// `(Σ′ + jitter I)⁻¹ (y - z)` in the time-major ordering.
    pub residual: DVector<f64>,
    /// Transport covectors `z′[i][a]`, `i = 0..N`.
    pub zprime: Vec<Vec<DVector<f64>>>,
    pub design_kernels: Vec<ReplicaKernels>,
    pub design_z: Vec<MeanTrajectory>,
    pub observed: ObservationSet,
}

impl ConditionedEmulator {
    pub fn n_design(&self) -> usize {
        self.design.len()
    }

    pub fn state_dim(&self) -> usize {
        self.xi0.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.observed
            .series
            .first()
            .and_then(|s| s.first())
            .map_or(0, |y| y.len())
    }

    pub fn sigma_dim(&self) -> usize {
        self.chol.dim()
    }
}

/// Timings and diagnostics of a conditioning run.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionStats {
    pub sigma_dim: usize,
    pub jitter: f64,
    pub jitter_relative: f64,
    pub assembly: Duration,
    pub factorization: Duration,
}

/// Cholesky factor of `Σ′ + j I` for the first schedule entry that works.
/// Schedule entries are relative to the mean diagonal; the absolute jitter
/// applied is returned.
pub fn factorize(blocks: &CovarianceBlocks, jitter_schedule: &[f64]) -> Result<(CholeskyFactor, f64)> {
    let dim = blocks.dim();
    if dim == 0 {
        return Ok((CholeskyFactor { l: DMatrix::zeros(0, 0) }, 0.0));
    }
    let scale = blocks.mean_diagonal();
    let pivot_rel = dim as f64 * f64::EPSILON;
    let mut tried = Vec::with_capacity(jitter_schedule.len());
    for &rel in jitter_schedule {
        let jitter = rel * scale;
        tried.push(jitter);
        let mut a = blocks.lower.clone();
        for d in 0..dim {
            a[(d, d)] += jitter;
        }
        if let Some(f) = cholesky(a, pivot_rel) {
            return Ok((f, jitter));
        }
    }
    Err(EmuError::NotPositiveDefinite { tried })
}

/// `vec(y - z)` over the conditioning times in the time-major ordering.
pub fn residual_vector(
    runs: &ObservationSet,
    design_z: &[MeanTrajectory],
    times: &[usize],
) -> Result<DVector<f64>> {
    let n = runs.n_replicas();
    if design_z.len() != n {
        return Err(EmuError::DimensionMismatch(format!(
            "{n} observed series but {} mean trajectories",
            design_z.len()
        )));
    }
    let mo = runs.series.first().and_then(|s| s.first()).map_or(0, |y| y.len());
    let mut out = DVector::zeros(times.len() * n * mo);
    for (p, &i) in times.iter().enumerate() {
        for a in 0..n {
            let (y, z) = match (runs.series[a].get(i), design_z[a].z.get(i)) {
                (Some(y), Some(z)) if z.len() == mo => (y, z),
                _ => {
                    return Err(EmuError::DimensionMismatch(format!(
                        "no observation of replica {a} at time index {i}"
                    )))
                }
            };
            for c in 0..mo {
                out[(p * n + a) * mo + c] = y[c] - z[c];
            }
        }
    }
    Ok(out)
}

/// Solves `(Σ′ + jitter I) r = vec(y - z)`.
pub fn residual_solve(
    factor: &CholeskyFactor,
    runs: &ObservationSet,
    design_z: &[MeanTrajectory],
    times: &[usize],
) -> Result<DVector<f64>> {
    let rhs = residual_vector(runs, design_z, times)?;
    if rhs.len() != factor.dim() {
        return Err(EmuError::DimensionMismatch(format!(
            "residual of length {} against a factor of dimension {}",
            rhs.len(),
            factor.dim()
        )));
    }
    Ok(factor.solve(&rhs))
}

/// Backward pass for the transport covectors:
///
/// ```text
/// z′_{N-1,a} = (H^a_N)ᵀ r^a_N
/// z′_{i,a}   = (H^a_{i+1})ᵀ r^a_{i+1} + (h^a_{i+1})ᵀ z′_{i+1,a}
/// ```
///
/// where `r^a_i` is zero at times that are not conditioned on.
pub fn zprime_covectors(
    design: &[ReplicaKernels],
    times: &[usize],
    r: &DVector<f64>,
) -> Vec<Vec<DVector<f64>>> {
    let n = design.len();
    let Some(first) = design.first() else {
        return Vec::new();
    };
    let n_int = first.n_intervals();
    let m = first.state_dim();
    let mo = first.obs_dim();
    let mut pos_of = vec![None; n_int + 1];
    for (p, &i) in times.iter().enumerate() {
        pos_of[i] = Some(p);
    }
    let mut out = vec![vec![DVector::zeros(m); n]; n_int];
    for (a, ka) in design.iter().enumerate() {
        let mut acc = DVector::<f64>::zeros(m);
        for i in (0..n_int).rev() {
            if i + 1 < n_int {
                acc = ka.h[i + 1].tr_mul(&acc);
            }
            if let Some(p) = pos_of[i + 1] {
                let start = (p * n + a) * mo;
                acc += ka.obs[i + 1].tr_mul(&r.rows(start, mo));
            }
            out[i][a] = acc.clone();
        }
    }
    out
}

/// Runs the whole conditioning phase.
pub fn condition(
    model: &dyn SimulationModel,
    design: &DesignSet,
    runs: &ObservationSet,
    grid: &TimeGrid,
    config: &ConditionConfig,
) -> Result<ConditionedEmulator> {
    condition_with_stats(model, design, runs, grid, config).map(|(ce, _)| ce)
}

pub fn condition_with_stats(
    model: &dyn SimulationModel,
    design: &DesignSet,
    runs: &ObservationSet,
    grid: &TimeGrid,
    config: &ConditionConfig,
) -> Result<(ConditionedEmulator, ConditionStats)> {
    let n = design.len();
    let m = model.state_dim();
    if runs.n_replicas() != n {
        return Err(EmuError::DimensionMismatch(format!(
            "{n} design inputs but {} observed series",
            runs.n_replicas()
        )));
    }
    if config.xi0.len() != m || config.cct.nrows() != m || config.cct.ncols() != m {
        return Err(EmuError::DimensionMismatch(format!(
            "state dimension {m} disagrees with initial state or noise covariance"
        )));
    }
    if runs
        .series
        .iter()
        .any(|s| s.len() != grid.n_intervals() + 1 || s.iter().any(|y| y.len() != model.obs_dim()))
    {
        return Err(EmuError::DimensionMismatch(
            "observations do not cover the grid with the model's output dimension".into(),
        ));
    }
    config.metric.validate()?;
    if design.inputs.iter().any(|x| x.grid_id != grid.id()) {
        return Err(EmuError::MismatchedGrids);
    }
    if model.shared_forcing() {
        if let Some(first) = design.inputs.first() {
            design.check_shared_forcing(first)?;
        }
    }
    let times = grid.conditioning_times(config.stride)?;

    let t_asm = Instant::now();
    let design_kernels: Vec<ReplicaKernels> = design
        .inputs
        .par_iter()
        .map(|x| assemble_replica_kernels(model, x, grid, config.cond_threshold))
        .collect::<Result<_>>()
        .map_err(|e| e.in_phase("kernel assembly"))?;
    let design_z: Vec<MeanTrajectory> = design_kernels
        .iter()
        .map(|k| mean_recursion(k, &config.xi0))
        .collect();
    let weights = coupling_matrix(design, None, &config.metric)?;
    let blocks = sigma_prime(&design_kernels, &config.cct, &weights, &times)
        .map_err(|e| e.in_phase("covariance assembly"))?;
    let assembly = t_asm.elapsed();

    let t_fac = Instant::now();
    let (chol, jitter) =
        factorize(&blocks, &config.jitter_schedule).map_err(|e| e.in_phase("factorization"))?;
    let residual = residual_solve(&chol, runs, &design_z, &times)?;
    let zprime = zprime_covectors(&design_kernels, &times, &residual);
    let factorization = t_fac.elapsed();

    let scale = blocks.mean_diagonal();
    let stats = ConditionStats {
        sigma_dim: blocks.dim(),
        jitter,
        jitter_relative: if scale > 0.0 { jitter / scale } else { 0.0 },
        assembly,
        factorization,
    };
    let ce = ConditionedEmulator {
        grid: grid.clone(),
        design: design.clone(),
        metric: config.metric.clone(),
        cct: config.cct.clone(),
        xi0: config.xi0.clone(),
        cond_threshold: config.cond_threshold,
        cond_times: times,
        chol,
        jitter,
        residual,
        zprime,
        design_kernels,
        design_z,
        observed: runs.clone(),
    };
    Ok((ce, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{InputTrajectory, MetricFlavor};
    use crate::model::AffineModel;

    fn single_block(v: f64) -> CovarianceBlocks {
        CovarianceBlocks {
            n: 1,
            obs_dim: 1,
            times: vec![1],
            lower: DMatrix::from_element(1, 1, v),
        }
    }

    #[test]
    fn factorize_unit() {
        let (f, j) = factorize(&single_block(1.0), &DEFAULT_JITTER_SCHEDULE).unwrap();
        assert_eq!(f.l, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(j, 0.0);
    }

    #[test]
    fn factorize_duplicate_needs_jitter() {
        let blocks = CovarianceBlocks {
            n: 2,
            obs_dim: 1,
            times: vec![1],
            lower: DMatrix::from_element(2, 2, 1.0),
        };
        assert!(matches!(
            factorize(&blocks, &[0.0]),
            Err(EmuError::NotPositiveDefinite { .. })
        ));
        let (_, j) = factorize(&blocks, &DEFAULT_JITTER_SCHEDULE).unwrap();
        assert!(j > 0.0);
    }

    #[test]
    fn residual_is_zero_when_runs_match_prior() {
        let model = AffineModel::new(
            DMatrix::from_element(1, 1, -0.5),
            vec![DMatrix::from_element(1, 1, -1.0)],
            DVector::from_element(1, 1.0),
            DMatrix::zeros(1, 0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.0, 0.5, 4).unwrap();
        let inputs: Vec<_> = [0.1, 0.7]
            .iter()
            .map(|p| InputTrajectory::new(vec![*p], vec![vec![]; 4], &grid).unwrap())
            .collect();
        let design = DesignSet::new(inputs).unwrap();
        let xi0 = DVector::from_element(1, 0.3);
        let z: Vec<_> = design
            .inputs
            .iter()
            .map(|x| {
                let k = assemble_replica_kernels(&model, x, &grid, DEFAULT_COND_THRESHOLD).unwrap();
                mean_recursion(&k, &xi0).z
            })
            .collect();
        let runs = ObservationSet::new(z).unwrap();
        let metric = MetricSpec::new(vec![0], vec![1.0], MetricFlavor::SquaredEuclidean).unwrap();
        let config = ConditionConfig::new(xi0, DMatrix::identity(1, 1), metric);
        let ce = condition(&model, &design, &runs, &grid, &config).unwrap();
        assert_eq!(ce.jitter, 0.0);
        assert!(ce.residual.iter().all(|r| *r == 0.0));
        assert!(ce.zprime.iter().flatten().all(|z| z.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn identity_sigma_passes_residual_through() {
        let f = CholeskyFactor {
            l: DMatrix::identity(2, 2),
        };
        let runs = ObservationSet::new(vec![
            vec![DVector::from_element(1, 0.0), DVector::from_element(1, 3.0)],
            vec![DVector::from_element(1, 0.0), DVector::from_element(1, -1.0)],
        ])
        .unwrap();
        let zero = MeanTrajectory {
            z_tilde: vec![],
            z: vec![DVector::zeros(1), DVector::from_element(1, 1.0)],
        };
        let r = residual_solve(&f, &runs, &[zero.clone(), zero], &[1]).unwrap();
        assert_eq!(r, DVector::from_vec(vec![2.0, -2.0]));
    }

    #[test]
    fn ragged_observations_are_rejected() {
        let err = ObservationSet::new(vec![
            vec![DVector::zeros(1); 3],
            vec![DVector::zeros(1); 2],
        ]);
        assert!(err.is_err());
    }
}
