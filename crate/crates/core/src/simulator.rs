//! Design-run generation (RK4 on the nonlinear model) and a Monte-Carlo
//! sampler of the coupled linear SDE.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::coupling::InputTrajectory;
use crate::covariance::{ReplicaKernels, TimeGrid};
use crate::error::{EmuError, Result};
use crate::linalg::psd_cholesky;
use crate::model::SimulationModel;

pub const DEFAULT_SUBSTEPS: usize = 10;

/// Classical RK4 with `substeps` equal steps per grid interval, forcing held
/// constant within each interval. Returns the state at every grid point.
pub fn integrate_ode(
    model: &dyn SimulationModel,
    input: &InputTrajectory,
    grid: &TimeGrid,
    xi0: &DVector<f64>,
    substeps: usize,
) -> Result<Vec<DVector<f64>>> {
    if substeps == 0 {
        return Err(EmuError::InvalidInput("substeps must be at least 1".into()));
    }
    if input.grid_id != grid.id() {
        return Err(EmuError::MismatchedGrids);
    }
    if xi0.len() != model.state_dim() {
        return Err(EmuError::DimensionMismatch("initial state".into()));
    }
    let p = &input.params;
    let mut x = xi0.clone();
    let mut out = Vec::with_capacity(grid.n_intervals() + 1);
    out.push(x.clone());
    for l in 0..grid.n_intervals() {
        let f = &input.forcing[l];
        let h = grid.dt(l) / substeps as f64;
        for s in 0..substeps {
            let k1 = model.rhs(&x, p, f);
            let k2 = model.rhs(&(&x + &k1 * (0.5 * h)), p, f);
            let k3 = model.rhs(&(&x + &k2 * (0.5 * h)), p, f);
            let k4 = model.rhs(&(&x + &k3 * h), p, f);
            x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            if let Some(c) = x.iter().position(|v| !v.is_finite()) {
                return Err(EmuError::NonFinite {
                    time: grid.times()[l] + (s + 1) as f64 * h,
                    component: c,
                });
            }
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Sample paths of the stacked system, recorded at the grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeSampleSet {
    /// One `(n+1)·m × (N+1)` matrix per path; column `i` is the stacked
    /// state at grid time `i`, replica `a` in rows `a·m..(a+1)·m`.
    pub paths: Vec<DMatrix<f64>>,
    pub seed: u64,
    pub state_dim: usize,
}

/// Euler–Maruyama on `ξ' = A ξ + b + noise`, noise covariance
/// `(K ⊗ CCᵀ) dt` across replicas. Path `p` draws from the ChaCha8 stream
/// `p` of `seed`, so results do not depend on thread scheduling.
pub fn sample_linear_sde(
    systems: &[ReplicaKernels],
    cct: &DMatrix<f64>,
    coupling: &DMatrix<f64>,
    grid: &TimeGrid,
    xi0: &DVector<f64>,
    paths: usize,
    seed: u64,
    euler_substeps: usize,
) -> Result<SdeSampleSet> {
    let reps = systems.len();
    let m = xi0.len();
    if euler_substeps == 0 {
        return Err(EmuError::InvalidInput("euler_substeps must be at least 1".into()));
    }
    if coupling.nrows() != reps || coupling.ncols() != reps || cct.nrows() != m || cct.ncols() != m {
        return Err(EmuError::DimensionMismatch("coupling or noise covariance".into()));
    }
    let n_int = grid.n_intervals();
    if systems.iter().any(|s| s.n_intervals() != n_int || s.state_dim() != m) {
        return Err(EmuError::DimensionMismatch("replica systems do not match the grid".into()));
    }
    let d = reps * m;
    let kron = coupling.kronecker(cct);
    let mut tried = Vec::new();
    let factor = [1e-12, 1e-10, 1e-8]
        .iter()
        .find_map(|&tol| {
            tried.push(tol);
            psd_cholesky(&kron, tol)
        })
        .ok_or(EmuError::NotPositiveDefinite { tried })?;
    // row-major copies for allocation-free inner loops
    let noise: Vec<f64> = (0..d * d).map(|k| factor[(k / d, k % d)]).collect();
    let drift: Vec<Vec<f64>> = (0..n_int)
        .map(|l| {
            let mut v = Vec::with_capacity(reps * m * m);
            for s in systems {
                v.extend((0..m * m).map(|k| s.a[l][(k / m, k % m)]));
            }
            v
        })
        .collect();
    let offset: Vec<Vec<f64>> = (0..n_int)
        .map(|l| systems.iter().flat_map(|s| s.b[l].iter().copied()).collect())
        .collect();

    let out: Vec<DMatrix<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut x: Vec<f64> = (0..reps).flat_map(|_| xi0.iter().copied()).collect();
            let mut dx = vec![0.0; d];
            let mut z = vec![0.0; d];
            let mut rec = DMatrix::zeros(d, n_int + 1);
            rec.column_mut(0).copy_from_slice(&x);
            for l in 0..n_int {
                let h = grid.dt(l) / euler_substeps as f64;
                let sh = h.sqrt();
                let (a, b) = (&drift[l], &offset[l]);
                for _ in 0..euler_substeps {
                    for zi in z.iter_mut() {
                        *zi = StandardNormal.sample(&mut rng);
                    }
                    for r in 0..reps {
                        for i in 0..m {
                            let row = r * m + i;
                            let mut s = b[row];
                            for j in 0..m {
                                s += a[r * m * m + i * m + j] * x[r * m + j];
                            }
                            dx[row] = s * h;
                        }
                    }
                    for i in 0..d {
                        let mut s = 0.0;
                        for j in 0..=i {
                            s += noise[i * d + j] * z[j];
                        }
                        x[i] += dx[i] + s * sh;
                    }
                }
                rec.column_mut(l + 1).copy_from_slice(&x);
            }
            rec
        })
        .collect();
    Ok(SdeSampleSet {
        paths: out,
        seed,
        state_dim: m,
    })
}

/// Sample mean and covariance of selected projected states.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_paths: usize,
}

impl SampleMoments {
    pub fn mean_std_error(&self, i: usize) -> f64 {
        (self.cov[(i, i)] / self.n_paths as f64).sqrt()
    }

    /// Gaussian approximation `sqrt((σ_ii σ_jj + σ_ij²) / P)`.
    pub fn cov_std_error(&self, i: usize, j: usize) -> f64 {
        let c = &self.cov;
        ((c[(i, i)] * c[(j, j)] + c[(i, j)] * c[(i, j)]) / self.n_paths as f64).sqrt()
    }
}

/// Moments of the feature vector that concatenates `H_a ξ^a_i` over `picks = [(a, i)]`.
pub fn projected_moments(
    set: &SdeSampleSet,
    obs: &[DMatrix<f64>],
    picks: &[(usize, usize)],
) -> SampleMoments {
    let m = set.state_dim;
    let feature = |path: &DMatrix<f64>| -> DVector<f64> {
        let parts: Vec<f64> = picks
            .iter()
            .flat_map(|&(a, i)| {
                let state = path.view((a * m, i), (m, 1));
                (&obs[a] * state).iter().copied().collect::<Vec<_>>()
            })
            .collect();
        DVector::from_vec(parts)
    };
    let feats: Vec<DVector<f64>> = set.paths.iter().map(feature).collect();
    let p = feats.len();
    let k = feats.first().map_or(0, |f| f.len());
    let mut mean = DVector::zeros(k);
    for f in &feats {
        mean += f;
    }
    mean /= p as f64;
    let mut cov = DMatrix::zeros(k, k);
    for f in &feats {
        let c = f - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (p.max(2) - 1) as f64;
    SampleMoments { mean, cov, n_paths: p }
}
