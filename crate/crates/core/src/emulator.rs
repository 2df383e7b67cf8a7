//! Online emulation against a conditioned emulator.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::conditioner::{ConditionConfig, ConditionedEmulator, ObservationSet};
use crate::coupling::{coupling_matrix, coupling_weight, DesignSet, InputTrajectory};
use crate::covariance::{
    assemble_replica_kernels, diagonal_blocks, mean_recursion, ReplicaKernels, TimeGrid,
};
use crate::error::{EmuError, Result};
use crate::kernels::{from_eigen, minv_cct, noise_block_apply, noise_block_g, step_eigen};
use crate::model::{interval_system, SimulationModel};

#[derive(Debug, Clone, PartialEq)]
pub struct EmulationResult {
    pub times: Vec<f64>,
    /// `ȳ_i` for `i = 0..=N`.
    pub mean: Vec<DVector<f64>>,
    /// Marginal covariance blocks `Σ̄_ii`, when requested.
    pub variance: Option<Vec<DMatrix<f64>>>,
    pub online_input: InputTrajectory,
    pub elapsed: Duration,
}

fn check_online(ce: &ConditionedEmulator, model: &dyn SimulationModel, x_new: &InputTrajectory) -> Result<()> {
    if x_new.grid_id != ce.grid.id() {
        return Err(EmuError::MismatchedGrids);
    }
    if model.state_dim() != ce.state_dim() {
        return Err(EmuError::DimensionMismatch(format!(
            "model has state dimension {}, emulator {}",
            model.state_dim(),
            ce.state_dim()
        )));
    }
    if model.shared_forcing() {
        ce.design.check_shared_forcing(x_new)?;
    }
    Ok(())
}

fn online_weights(ce: &ConditionedEmulator, x_new: &InputTrajectory) -> Result<Vec<f64>> {
    ce.design
        .inputs
        .iter()
        .map(|x| coupling_weight(x_new, x, &ce.metric))
        .collect()
}

/// Emulated mean, and the marginal variance if `with_variance` is set.
pub fn emulate(
    ce: &ConditionedEmulator,
    model: &dyn SimulationModel,
    x_new: &InputTrajectory,
    with_variance: bool,
) -> Result<EmulationResult> {
    let mut res = emulate_mean(ce, model, x_new)?;
    if with_variance {
        let start = Instant::now();
        res.variance = Some(emulate_variance(ce, model, x_new)?);
        res.elapsed += start.elapsed();
    }
    Ok(res)
}

/// The linear-cost mean recursion
/// `ỹ_{i+1} = h_i ỹ_i + k_i + Σ_a g^{new,a}_i z′_{i,a}`, `ȳ_i = H_i ỹ_i`.
pub fn emulate_mean(
    ce: &ConditionedEmulator,
    model: &dyn SimulationModel,
    x_new: &InputTrajectory,
) -> Result<EmulationResult> {
    let start = Instant::now();
    check_online(ce, model, x_new)?;
    let weights = online_weights(ce, x_new)?;
    let n_int = ce.grid.n_intervals();
    let obs = model.observation(&x_new.params);

    let mut state = ce.xi0.clone();
    let mut mean = Vec::with_capacity(n_int + 1);
    mean.push(&obs * &state);
    for i in 0..n_int {
        let (_, b, ed) = interval_system(
            model,
            &x_new.params,
            &x_new.forcing[i],
            ce.cond_threshold,
        )
        .map_err(|e| e.with_interval(i))?;
        let dt = ce.grid.dt(i);
        let mut next = from_eigen(&ed, &step_eigen(&ed, &state, &b, dt));
        if !ce.design_kernels.is_empty() {
            let left = minv_cct(&ed, &ce.cct);
            for (a, ka) in ce.design_kernels.iter().enumerate() {
                next += noise_block_apply(&ed, &left, &ka.ed[i], dt, weights[a], &ce.zprime[i][a]);
            }
        }
        state = next;
        mean.push(&obs * &state);
    }
    Ok(EmulationResult {
        times: ce.grid.times().to_vec(),
        mean,
        variance: None,
        online_input: x_new.clone(),
        elapsed: start.elapsed(),
    })
}

/// Marginal posterior covariance blocks `Σ̄_ii`, `i = 0..=N`, from the
/// dense formula `Σ^{new,new}_ii - vᵀv`, `v = L⁻¹ (Σ^{new,·}_{i,·})ᵀ`.
pub fn emulate_variance(
    ce: &ConditionedEmulator,
    model: &dyn SimulationModel,
    x_new: &InputTrajectory,
) -> Result<Vec<DMatrix<f64>>> {
    check_online(ce, model, x_new)?;
    let weights = online_weights(ce, x_new)?;
    let kn = assemble_replica_kernels(model, x_new, &ce.grid, ce.cond_threshold)?;
    let n_int = kn.n_intervals();
    let mo = kn.obs_dim();
    let n = ce.n_design();
    let prior = diagonal_blocks(&kn, &kn, &ce.cct, 1.0);

    let mut out: Vec<DMatrix<f64>> = prior
        .iter()
        .zip(&kn.obs)
        .map(|(d, h)| h * d * h.transpose())
        .collect();
    if n == 0 || ce.cond_times.is_empty() {
        return Ok(out);
    }

    let mut pos_of = vec![None; n_int + 1];
    for (p, &i) in ce.cond_times.iter().enumerate() {
        pos_of[i] = Some(p);
    }
    let cols = n_int * mo;
    let dim = ce.sigma_dim();

    // cross blocks Σ^{new,a}_{ij}, i = 1..=N, j a conditioning time
    let per_replica: Vec<Vec<(usize, usize, DMatrix<f64>)>> = ce
        .design_kernels
        .par_iter()
        .enumerate()
        .map(|(a, ka)| {
            let d = diagonal_blocks(&kn, ka, &ce.cct, weights[a]);
            let mut blocks = Vec::new();
            // i ≥ j: propagate the online side forward
            for (pj, &j) in ce.cond_times.iter().enumerate() {
                let mut u = &d[j] * ka.obs[j].transpose();
                for i in j..=n_int {
                    if i > j {
                        u = &kn.h[i - 1] * u;
                    }
                    blocks.push((pj, i, &kn.obs[i] * &u));
                }
            }
            // i < j: propagate the design side forward
            for i in 1..n_int {
                let mut v = d[i].transpose();
                for j in i + 1..=n_int {
                    v = &ka.h[j - 1] * v;
                    if let Some(pj) = pos_of[j] {
                        blocks.push((pj, i, &kn.obs[i] * v.transpose() * ka.obs[j].transpose()));
                    }
                }
            }
            blocks
        })
        .collect();

    let mut rows = DMatrix::<f64>::zeros(dim, cols);
    for (a, blocks) in per_replica.into_iter().enumerate() {
        for (pj, i, blk) in blocks {
            for r in 0..mo {
                for c in 0..mo {
                    rows[((pj * n + a) * mo + r, (i - 1) * mo + c)] = blk[(c, r)];
                }
            }
        }
    }
    ce.chol.forward_mut(&mut rows);
    for i in 1..=n_int {
        let v = rows.columns((i - 1) * mo, mo);
        let reduced = &out[i] - v.tr_mul(&v);
        out[i] = (&reduced + reduced.transpose()) * 0.5;
    }
    Ok(out)
}

/// `sqrt((1/N) Σ_{i=1..N} |ȳ_i - y_i|²)`.
pub fn d_value(emulated: &[DVector<f64>], simulated: &[DVector<f64>]) -> Result<f64> {
    if emulated.len() != simulated.len() || emulated.len() < 2 {
        return Err(EmuError::DimensionMismatch(format!(
            "series of length {} and {}",
            emulated.len(),
            simulated.len()
        )));
    }
    let mut sum = 0.0;
    for (e, s) in emulated.iter().zip(simulated).skip(1) {
        if e.len() != s.len() {
            return Err(EmuError::DimensionMismatch("output dimensions differ".into()));
        }
        sum += (e - s).norm_squared();
    }
    Ok((sum / (emulated.len() - 1) as f64).sqrt())
}

/// Conditional mean and covariance from the full joint Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseConditional {
    /// `ȳ_i`, `i = 0..=N`.
    pub mean: Vec<DVector<f64>>,
    /// Posterior covariance over the online outputs at `i = 1..=N`,
    /// index `(i - 1)·m′ + c`.
    pub cov: DMatrix<f64>,
    pub jitter: f64,
}

impl DenseConditional {
    /// Diagonal blocks of `cov`, with a zero block at `i = 0`.
    pub fn marginal_blocks(&self) -> Vec<DMatrix<f64>> {
        let mo = self.mean.first().map_or(0, |y| y.len());
        let mut out = vec![DMatrix::zeros(mo, mo)];
        for i in 0..self.mean.len() - 1 {
            out.push(self.cov.view((i * mo, i * mo), (mo, mo)).into_owned());
        }
        out
    }
}

/// Joint-Gaussian conditioning on the full covariance, built from the
/// explicit sum `Σ̃^{αβ}_{ij} = Σ_{k<min(i,j)} Φ^α(i,k+1) g^{αβ}_k Φ^β(j,k+1)ᵀ`
/// and solved by LU. Quadratic memory in `N·n`; for small problems only.
pub fn dense_oracle(
    model: &dyn SimulationModel,
    design: &DesignSet,
    runs: &ObservationSet,
    x_new: &InputTrajectory,
    grid: &TimeGrid,
    config: &ConditionConfig,
) -> Result<DenseConditional> {
    let n = design.len();
    let n_int = grid.n_intervals();
    let times = grid.conditioning_times(config.stride)?;
    let mut kernels: Vec<ReplicaKernels> = Vec::with_capacity(n + 1);
    kernels.push(assemble_replica_kernels(model, x_new, grid, config.cond_threshold)?);
    for x in &design.inputs {
        kernels.push(assemble_replica_kernels(model, x, grid, config.cond_threshold)?);
    }
    let mo = kernels[0].obs_dim();
    // coupling_matrix puts the online replica last; move it first
    let w_raw = coupling_matrix(design, Some(x_new), &config.metric)?;
    let idx = |alpha: usize| if alpha == 0 { n } else { alpha - 1 };
    let weight = |alpha: usize, beta: usize| w_raw[(idx(alpha), idx(beta))];

    // Φ^α(i, l) for l ≤ i
    let transitions: Vec<Vec<Vec<DMatrix<f64>>>> = kernels
        .iter()
        .map(|k| {
            let m = k.state_dim();
            let mut phi: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n_int + 1);
            for i in 0..=n_int {
                let mut row = Vec::with_capacity(i + 1);
                for l in 0..i {
                    row.push(&k.h[i - 1] * &phi[i - 1][l]);
                }
                row.push(DMatrix::identity(m, m));
                phi.push(row);
            }
            phi
        })
        .collect();
    let g: Vec<Vec<Vec<DMatrix<f64>>>> = (0..=n)
        .map(|alpha| {
            (0..=n)
                .map(|beta| {
                    (0..n_int)
                        .map(|l| {
                            noise_block_g(
                                &kernels[alpha].ed[l],
                                &kernels[beta].ed[l],
                                &config.cct,
                                kernels[alpha].dt[l],
                                weight(alpha, beta),
                            )
                            .g
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let cross = |alpha: usize, i: usize, beta: usize, j: usize| -> DMatrix<f64> {
        let m = kernels[alpha].state_dim();
        let mut s = DMatrix::<f64>::zeros(m, m);
        for l in 0..i.min(j) {
            s += &transitions[alpha][i][l + 1] * &g[alpha][beta][l] * transitions[beta][j][l + 1].transpose();
        }
        &kernels[alpha].obs[i] * s * kernels[beta].obs[j].transpose()
    };

    // joint index: online times 1..=N first, then design in time-major order
    let mut slots: Vec<(usize, usize)> = (1..=n_int).map(|i| (0, i)).collect();
    for &i in &times {
        for a in 1..=n {
            slots.push((a, i));
        }
    }
    let total = slots.len() * mo;
    let mut joint = DMatrix::<f64>::zeros(total, total);
    for (p, &(alpha, i)) in slots.iter().enumerate() {
        for (q, &(beta, j)) in slots.iter().enumerate().take(p + 1) {
            let blk = cross(alpha, i, beta, j);
            for r in 0..mo {
                for c in 0..mo {
                    joint[(p * mo + r, q * mo + c)] = blk[(r, c)];
                    joint[(q * mo + c, p * mo + r)] = blk[(r, c)];
                }
            }
        }
    }

    let prior_mean: Vec<_> = kernels.iter().map(|k| mean_recursion(k, &config.xi0).z).collect();
    let online = n_int * mo;
    let cond = total - online;
    let s11 = joint.view((0, 0), (online, online)).into_owned();
    if cond == 0 {
        return Ok(DenseConditional {
            mean: prior_mean[0].clone(),
            cov: s11,
            jitter: 0.0,
        });
    }
    let s12 = joint.view((0, online), (online, cond)).into_owned();
    let s22 = joint.view((online, online), (cond, cond)).into_owned();
    let scale = s22.trace() / cond as f64;
    let mut chosen = None;
    let mut tried = Vec::new();
    for &rel in &config.jitter_schedule {
        let jitter = rel * scale;
        tried.push(jitter);
        let shifted = &s22 + DMatrix::identity(cond, cond) * jitter;
        if nalgebra::Cholesky::new(shifted.clone()).is_some() {
            chosen = Some((shifted, jitter));
            break;
        }
    }
    let (s22, jitter) = chosen.ok_or(EmuError::NotPositiveDefinite { tried })?;
    let lu = s22.lu();

    let mut resid = DVector::<f64>::zeros(cond);
    for (q, &(a, i)) in slots[n_int..].iter().enumerate() {
        let y = &runs.series[a - 1][i];
        let z = &prior_mean[a][i];
        for c in 0..mo {
            resid[q * mo + c] = y[c] - z[c];
        }
    }
    let solved = lu
        .solve(&resid)
        .ok_or(EmuError::NotPositiveDefinite { tried: vec![jitter] })?;
    let shift = &s12 * solved;
    let gain = lu
        .solve(&s12.transpose())
        .ok_or(EmuError::NotPositiveDefinite { tried: vec![jitter] })?;
    let cov = &s11 - &s12 * gain;
    let cov = (&cov + cov.transpose()) * 0.5;

    let mut mean = prior_mean[0].clone();
    for i in 1..=n_int {
        for c in 0..mo {
            mean[i][c] += shift[(i - 1) * mo + c];
        }
    }
    Ok(DenseConditional { mean, cov, jitter })
}
