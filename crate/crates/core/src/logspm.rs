//! The logSPM soil/groundwater/river storage model.
//!
//! State `(h_s, h_gw, h_r)`, forcing per interval `[i_rain, i_pet]`,
//! parameters in the order of [`PARAM_NAMES`].

use nalgebra::{dmatrix, Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::coupling::{MetricFlavor, MetricSpec};
use crate::error::{EmuError, Result};
use crate::kernels::EigenDecomp;
use crate::model::SimulationModel;

pub const PARAM_NAMES: [&str; 8] = ["k_s", "s_F", "k_et", "q_lat_max", "q_gw_max", "k_bf", "k_dp", "k_r"];

/// Relative separation below which two eigenvalues count as equal.
pub const EIG_SEP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSpmParams {
    pub k_s: f64,
    pub s_f: f64,
    pub k_et: f64,
    pub q_lat_max: f64,
    pub q_gw_max: f64,
    pub k_bf: f64,
    pub k_dp: f64,
    pub k_r: f64,
}

impl LogSpmParams {
    pub fn from_slice(p: &[f64]) -> Result<Self> {
        let &[k_s, s_f, k_et, q_lat_max, q_gw_max, k_bf, k_dp, k_r] = p else {
            return Err(EmuError::DimensionMismatch(format!(
                "logSPM takes 8 parameters, got {}",
                p.len()
            )));
        };
        let out = LogSpmParams {
            k_s,
            s_f,
            k_et,
            q_lat_max,
            q_gw_max,
            k_bf,
            k_dp,
            k_r,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.k_s,
            self.s_f,
            self.k_et,
            self.q_lat_max,
            self.q_gw_max,
            self.k_bf,
            self.k_dp,
            self.k_r,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in PARAM_NAMES.iter().zip(self.to_vec()) {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EmuError::InvalidInput(format!("parameter {name} = {v} is not positive")));
            }
        }
        Ok(())
    }

    /// Saturated-area and evapotranspiration fractions at soil storage `h_s`.
    pub fn fractions(&self, h_s: f64) -> (f64, f64) {
        let f_sat = 1.0 / (1.0 + self.s_f * (-self.k_s * h_s).exp()) - 1.0 / (1.0 + self.s_f);
        let f_et = -(-self.k_et * h_s).exp_m1();
        (f_sat, f_et)
    }
}

/// Entries of the lower-triangular linearization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearEntries {
    pub lambda: [f64; 3],
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LinearEntries {
    pub fn matrix(&self) -> DMatrix<f64> {
        let [l1, l2, l3] = self.lambda;
        dmatrix![
            l1, 0.0, 0.0;
            self.a, l2, 0.0;
            self.c, self.b, l3
        ]
    }

    fn check_separated(&self) -> Result<()> {
        let l = self.lambda;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            if (l[i] - l[j]).abs() <= EIG_SEP_TOL * l[i].abs().max(l[j].abs()) {
                return Err(EmuError::DegenerateEigenvalues(l[i], l[j]));
            }
        }
        Ok(())
    }
}

/// Eigenvectors of the lower-triangular linearization, unit diagonal, in
/// eigenvalue order `λ1, λ2, λ3`.
/// Inverse of a unit lower-triangular 3×3 matrix.
pub fn unit_lower_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, r, q) = (m[(1, 0)], m[(2, 0)], m[(2, 1)]);
    dmatrix![
        1.0, 0.0, 0.0;
        -p, 1.0, 0.0;
        p * q - r, -q, 1.0
    ]
}

pub fn closed_form_eigen(e: &LinearEntries) -> Result<(DMatrix<f64>, DVector<f64>)> {
    e.check_separated()?;
    let [l1, l2, l3] = e.lambda;
    let d12 = l1 - l2;
    let m = dmatrix![
        1.0, 0.0, 0.0;
        e.a / d12, 1.0, 0.0;
        (e.c * d12 + e.a * e.b) / (d12 * (l1 - l3)), e.b / (l2 - l3), 1.0
    ];
    Ok((m, DVector::from_row_slice(&e.lambda)))
}

/// logSPM with the secant linearization points and watershed area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSpm {
    pub area: f64,
    pub h_s1: f64,
    pub h_s2: f64,
}

impl LogSpm {
    pub fn new(area: f64, h_s1: f64, h_s2: f64) -> Result<Self> {
        for (name, v) in [("area", area), ("h_s1", h_s1), ("h_s2", h_s2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EmuError::InvalidInput(format!("{name} = {v} is not positive")));
            }
        }
        Ok(LogSpm { area, h_s1, h_s2 })
    }

    /// Secant slopes `(a_sat, a_et)` through the origin and the curves at `h_s1`, `h_s2`.
    pub fn secants(&self, p: &LogSpmParams) -> (f64, f64) {
        (p.fractions(self.h_s1).0 / self.h_s1, p.fractions(self.h_s2).1 / self.h_s2)
    }

    pub fn entries(&self, p: &LogSpmParams, forcing: &[f64]) -> Result<LinearEntries> {
        let (rain, pet) = split_forcing(forcing)?;
        let (a_sat, a_et) = self.secants(p);
        Ok(LinearEntries {
            lambda: [
                -a_sat * (rain + p.q_lat_max + p.q_gw_max) - a_et * pet,
                -p.k_bf - p.k_dp,
                -p.k_r,
            ],
            a: a_sat * p.q_gw_max,
            b: p.k_bf,
            c: a_sat * (rain + p.q_lat_max),
        })
    }
}

fn split_forcing(forcing: &[f64]) -> Result<(f64, f64)> {
    match forcing {
        &[rain, pet] if rain >= 0.0 && pet >= 0.0 && rain.is_finite() && pet.is_finite() => Ok((rain, pet)),
        &[_, _] => Err(EmuError::InvalidInput(format!("forcing {forcing:?} is negative or non-finite"))),
        _ => Err(EmuError::DimensionMismatch(format!(
            "logSPM forcing is [i_rain, i_pet], got {} values",
            forcing.len()
        ))),
    }
}

impl SimulationModel for LogSpm {
    fn id(&self) -> &str {
        "logspm"
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn rhs(&self, state: &DVector<f64>, params: &[f64], forcing: &[f64]) -> DVector<f64> {
        let (k_s, s_f, k_et) = (params[0], params[1], params[2]);
        let (q_lat_max, q_gw_max, k_bf, k_dp, k_r) = (params[3], params[4], params[5], params[6], params[7]);
        let (rain, pet) = (forcing[0], forcing[1]);
        let (h_s, h_gw, h_r) = (state[0], state[1], state[2]);
        let f_sat = 1.0 / (1.0 + s_f * (-k_s * h_s).exp()) - 1.0 / (1.0 + s_f);
        let f_et = -(-k_et * h_s).exp_m1();

        let q_runoff = f_sat * rain;
        let q_et = f_et * pet;
        let q_lat = f_sat * q_lat_max;
        let q_gw = f_sat * q_gw_max;
        let q_bf = k_bf * h_gw;
        let q_dp = k_dp * h_gw;
        let q_r = k_r * h_r;
        DVector::from_vec(vec![
            rain - q_runoff - q_et - q_lat - q_gw,
            q_gw - q_bf - q_dp,
            q_runoff + q_lat + q_bf - q_r,
        ])
    }

    fn linearize(&self, params: &[f64], forcing: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let p = LogSpmParams::from_slice(params)?;
        let e = self.entries(&p, forcing)?;
        e.check_separated()?;
        Ok((e.matrix(), DVector::from_vec(vec![forcing[0], 0.0, 0.0])))
    }

    /// River discharge `A_W k_r h_r`.
    fn observation(&self, params: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 3, &[0.0, 0.0, self.area * params[7]])
    }

    fn shared_forcing(&self) -> bool {
        true
    }

    fn eigen(&self, params: &[f64], forcing: &[f64], cond_threshold: f64) -> Option<Result<EigenDecomp>> {
        let run = || {
            let p = LogSpmParams::from_slice(params)?;
            let (m, lambda) = closed_form_eigen(&self.entries(&p, forcing)?)?;
            let minv = unit_lower_inverse(&m);
            let c = |x: &DMatrix<f64>| x.map(|v| Complex::new(v, 0.0));
            EigenDecomp::from_parts_with_inverse(c(&m), c(&minv), lambda.map(|v| Complex::new(v, 0.0)), cond_threshold)
        };
        Some(run())
    }
}

/// Scaled squared-Euclidean metric over all eight parameters, one range per parameter.
pub fn default_metric(ranges: &[(f64, f64)]) -> Result<MetricSpec> {
    if ranges.len() != PARAM_NAMES.len() {
        return Err(EmuError::DimensionMismatch(format!("expected 8 ranges, got {}", ranges.len())));
    }
    if let Some((i, (lo, hi))) = ranges.iter().enumerate().find(|(_, (lo, hi))| !(lo < hi)) {
        return Err(EmuError::InvalidInput(format!(
            "range of {} is empty: [{lo}, {hi}]",
            PARAM_NAMES[i]
        )));
    }
    MetricSpec::new(
        (0..ranges.len()).collect(),
        ranges.iter().map(|(lo, hi)| hi - lo).collect(),
        MetricFlavor::SquaredEuclidean,
    )
}

/// `C Cᵀ` with `C = diag(frac · ξ0)`.
pub fn noise_spec(xi0: &DVector<f64>, frac: f64) -> Result<DMatrix<f64>> {
    if !(frac > 0.0 && frac.is_finite()) {
        return Err(EmuError::InvalidInput(format!("noise fraction {frac} is not positive")));
    }
    if let Some(v) = xi0.iter().find(|v| !(**v > 0.0)) {
        return Err(EmuError::InvalidInput(format!("initial state component {v} is not positive")));
    }
    let c = xi0 * frac;
    Ok(DMatrix::from_diagonal(&c.component_mul(&c)))
}

/// Two-state Markov rain with exponential depths, and seasonal evapotranspiration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticForcing {
    pub p_wet_after_dry: f64,
    pub p_wet_after_wet: f64,
    pub mean_depth: f64,
    pub max_depth: f64,
    pub pet_mean: f64,
    pub pet_amplitude: f64,
    pub pet_period: f64,
}

impl SyntheticForcing {
    /// `[i_rain, i_pet]` per interval of the grid `times`.
    pub fn generate(&self, times: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
        let probs = [self.p_wet_after_dry, self.p_wet_after_wet];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || !(self.mean_depth > 0.0 && self.max_depth > 0.0 && self.pet_period > 0.0)
            || self.pet_amplitude.abs() > self.pet_mean
        {
            return Err(EmuError::InvalidInput("synthetic forcing settings out of range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = Exp::new(1.0 / self.mean_depth).map_err(|e| EmuError::InvalidInput(e.to_string()))?;
        let mut wet = false;
        Ok(times
            .windows(2)
            .map(|t| {
                wet = rng.random::<f64>() < probs[wet as usize];
                let rain = if wet { depth.sample(&mut rng).min(self.max_depth) } else { 0.0 };
                let mid = 0.5 * (t[0] + t[1]);
                let pet = self.pet_mean + self.pet_amplitude * (std::f64::consts::TAU * mid / self.pet_period).sin();
                vec![rain, pet]
            })
            .collect())
    }
}
