//! Per-replica kernels over the time grid, the mean recursion, and the
//! block-recursive assembly of the conditioning covariance.
//!
//! With `Σ̃_00 = 0` the two-time state covariances of replicas `a`, `b` obey
//!
//! ```text
//! Σ̃_{i+1,j} = h^a_i Σ̃_ij              (j ≤ i)
//! Σ̃_ii      = Σ̃_{i,i-1} (h^b_{i-1})ᵀ + g^{ab}_{i-1}
//! ```
//!
//! which is evaluated as a diagonal sweep `D_{j+1} = h^a_j D_j (h^b_j)ᵀ + g_j`
//! followed by independent forward propagation down each block column.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::coupling::InputTrajectory;
use crate::error::{EmuError, Result};
use crate::kernels::{drift_k, minv_cct, noise_block_from_left, propagator_h, EigenDecomp};
use crate::model::{interval_system, SimulationModel};

/// Strictly increasing time points `t_0 < … < t_N`, `N ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(EmuError::InvalidInput("time grid needs at least two points".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(EmuError::InvalidInput("time grid has non-finite points".into()));
        }
        if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(EmuError::InvalidInput(format!(
                "time grid is not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(TimeGrid { times })
    }

    pub fn uniform(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(EmuError::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        Self::new((0..=n_steps).map(|i| t0 + dt * i as f64).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of intervals `N`.
    pub fn n_intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, l: usize) -> f64 {
        self.times[l + 1] - self.times[l]
    }

    /// FNV-1a hash of the time points' bit patterns.
    pub fn id(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.times {
            for byte in t.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Conditioning time indices `stride, 2·stride, …` up to `N`.
    pub fn conditioning_times(&self, stride: usize) -> Result<Vec<usize>> {
        if stride == 0 || stride > self.n_intervals() {
            return Err(EmuError::InvalidInput(format!(
                "conditioning stride {stride} outside 1..={}",
                self.n_intervals()
            )));
        }
        Ok((stride..=self.n_intervals()).step_by(stride).collect())
    }
}

/// Linearization and interval kernels of one replica over the whole grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaKernels {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    pub ed: Vec<EigenDecomp>,
    pub h: Vec<DMatrix<f64>>,
    pub k: Vec<DVector<f64>>,
    /// Observation matrices at `t_0..=t_N`.
    pub obs: Vec<DMatrix<f64>>,
    pub dt: Vec<f64>,
}

impl ReplicaKernels {
    pub fn n_intervals(&self) -> usize {
        self.h.len()
    }

    pub fn state_dim(&self) -> usize {
        self.h.first().map_or(0, |h| h.nrows())
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.first().map_or(0, |h| h.nrows())
    }
}

pub fn assemble_replica_kernels(
    model: &dyn SimulationModel,
    input: &InputTrajectory,
    grid: &TimeGrid,
    cond_threshold: f64,
) -> Result<ReplicaKernels> {
    if input.grid_id != grid.id() {
        return Err(EmuError::MismatchedGrids);
    }
    let n_int = grid.n_intervals();
    let mut rk = ReplicaKernels {
        a: Vec::with_capacity(n_int),
        b: Vec::with_capacity(n_int),
        ed: Vec::with_capacity(n_int),
        h: Vec::with_capacity(n_int),
        k: Vec::with_capacity(n_int),
        obs: Vec::with_capacity(n_int + 1),
        dt: Vec::with_capacity(n_int),
    };
    for l in 0..n_int {
        let (a, b, ed) = interval_system(model, &input.params, &input.forcing[l], cond_threshold)
            .map_err(|e| e.with_interval(l))?;
        let dt = grid.dt(l);
        rk.h.push(propagator_h(&ed, dt));
        rk.k.push(drift_k(&ed, &b, dt));
        rk.a.push(a);
        rk.b.push(b);
        rk.ed.push(ed);
        rk.dt.push(dt);
    }
    let obs = model.observation(&input.params);
    rk.obs = vec![obs; n_int + 1];
    Ok(rk)
}

/// Prior mean of one replica, unprojected and projected.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTrajectory {
    pub z_tilde: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
}

/// `z̃_0 = ξ0`, `z̃_{i+1} = h_i z̃_i + k_i`, `z_i = H_i z̃_i`.
pub fn mean_recursion(rk: &ReplicaKernels, xi0: &DVector<f64>) -> MeanTrajectory {
    let mut z_tilde = Vec::with_capacity(rk.n_intervals() + 1);
    z_tilde.push(xi0.clone());
    for (h, k) in rk.h.iter().zip(&rk.k) {
        let next = h * z_tilde.last().unwrap() + k;
        z_tilde.push(next);
    }
    let z = z_tilde.iter().zip(&rk.obs).map(|(x, h)| h * x).collect();
    MeanTrajectory { z_tilde, z }
}

/// Equal-time cross-covariances `D_j = Σ̃_jj^{ab}` for `j = 0..=N`.
pub fn diagonal_blocks(
    ka: &ReplicaKernels,
    kb: &ReplicaKernels,
    cct: &DMatrix<f64>,
    w: f64,
) -> Vec<DMatrix<f64>> {
    let m = ka.state_dim();
    let mut out = Vec::with_capacity(ka.n_intervals() + 1);
    out.push(DMatrix::zeros(m, m));
    for l in 0..ka.n_intervals() {
        let left = minv_cct(&ka.ed[l], cct);
        let g = noise_block_from_left(&ka.ed[l], &left, &kb.ed[l], ka.dt[l], w);
        let next = &ka.h[l] * out.last().unwrap() * kb.h[l].transpose() + g;
        out.push(next);
    }
    out
}

/// The conditioning covariance `Σ′` over design replicas at the conditioning
/// times. Row/column order is time-major: flat index
/// `(pos(i)·n + a)·m′ + c`. Only the lower triangle is computed.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBlocks {
    pub n: usize,
    pub obs_dim: usize,
    pub times: Vec<usize>,
    pub lower: DMatrix<f64>,
}

impl CovarianceBlocks {
    pub fn dim(&self) -> usize {
        self.times.len() * self.n * self.obs_dim
    }

    pub fn index(&self, pos: usize, a: usize, c: usize) -> usize {
        (pos * self.n + a) * self.obs_dim + c
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        if r >= c {
            self.lower[(r, c)]
        } else {
            self.lower[(c, r)]
        }
    }

    /// Block `Σ_{ij}^{ab}` addressed by conditioning-time positions.
    pub fn block(&self, pi: usize, a: usize, pj: usize, b: usize) -> DMatrix<f64> {
        let mo = self.obs_dim;
        DMatrix::from_fn(mo, mo, |r, c| self.get(self.index(pi, a, r), self.index(pj, b, c)))
    }

    /// The full symmetric matrix, upper triangle mirrored from the lower.
    pub fn to_symmetric(&self) -> DMatrix<f64> {
        let mut s = self.lower.clone();
        s.fill_upper_triangle_with_lower_triangle();
        s
    }

    pub fn mean_diagonal(&self) -> f64 {
        let d = self.dim();
        if d == 0 {
            return 0.0;
        }
        self.lower.diagonal().sum() / d as f64
    }
}

/// Assembles `Σ′` for the design replicas. `weights` holds the coupling
/// weights `w_ab` (not squared).
pub fn sigma_prime(
    design: &[ReplicaKernels],
    cct: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    times: &[usize],
) -> Result<CovarianceBlocks> {
    let n = design.len();
    if weights.nrows() != n || weights.ncols() != n {
        return Err(EmuError::DimensionMismatch(format!(
            "{n} replicas but {}x{} coupling matrix",
            weights.nrows(),
            weights.ncols()
        )));
    }
    let Some(first) = design.first() else {
        return Ok(CovarianceBlocks {
            n: 0,
            obs_dim: 0,
            times: times.to_vec(),
            lower: DMatrix::zeros(0, 0),
        });
    };
    let n_int = first.n_intervals();
    let mo = first.obs_dim();
    if design
        .iter()
        .any(|k| k.n_intervals() != n_int || k.obs_dim() != mo || k.dt != first.dt)
    {
        return Err(EmuError::MismatchedGrids);
    }
    if times.iter().any(|&i| i == 0 || i > n_int) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EmuError::InvalidInput("conditioning times must increase within 1..=N".into()));
    }

    // D[a][b][j] for all pairs; the b > a half is the transpose of a > b.
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..=a).map(move |b| (a, b))).collect();
    let lower_diag: Vec<Vec<DMatrix<f64>>> = pairs
        .par_iter()
        .map(|&(a, b)| diagonal_blocks(&design[a], &design[b], cct, weights[(a, b)]))
        .collect();
    let mut diag: Vec<Vec<Vec<DMatrix<f64>>>> = vec![vec![Vec::new(); n]; n];
    for (&(a, b), d) in pairs.iter().zip(lower_diag) {
        if a != b {
            diag[b][a] = d.iter().map(|x| x.transpose()).collect();
        }
        diag[a][b] = d;
    }

    let mut pos_of = vec![None; n_int + 1];
    for (p, &i) in times.iter().enumerate() {
        pos_of[i] = Some(p);
    }

    let dim = times.len() * n * mo;
    let mut lower = DMatrix::<f64>::zeros(dim, dim);
    // each chunk holds the m′ contiguous columns of block column (pos(j), b)
    lower
        .as_mut_slice()
        .par_chunks_mut(dim * mo)
        .enumerate()
        .for_each(|(q, chunk)| {
            let (pj, b) = (q / n, q % n);
            let j = times[pj];
            let hbt = design[b].obs[j].transpose();
            for (a, ka) in design.iter().enumerate() {
                let mut v = &diag[a][b][j] * &hbt;
                for i in j..=n_int {
                    if i > j {
                        v = &ka.h[i - 1] * &v;
                    }
                    let Some(pi) = pos_of[i] else { continue };
                    if i == j && a < b {
                        continue;
                    }
                    let blk = &ka.obs[i] * &v;
                    let row0 = (pi * n + a) * mo;
                    for c in 0..mo {
                        for r in 0..mo {
                            chunk[c * dim + row0 + r] = blk[(r, c)];
                        }
                    }
                }
            }
        });

    Ok(CovarianceBlocks {
        n,
        obs_dim: mo,
        times: times.to_vec(),
        lower,
    })
}
