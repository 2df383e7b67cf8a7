//! Reference computations that avoid eigendecompositions entirely: Taylor
//! matrix exponentials and Gauss–Legendre quadrature of the defining integrals.
#![allow(dead_code)]

use dynemu_core::{Result, SimulationModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// `exp(a)` by scaling and squaring of a 30-term Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Nodes and weights of `order`-point Gauss–Legendre on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    (0..order)
        .map(|k| {
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (order as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for j in 2..=order {
                    let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = order as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// Composite Gauss–Legendre of a matrix-valued integrand over `[lo, hi]`.
pub fn integrate(f: impl Fn(f64) -> DMatrix<f64>, lo: f64, hi: f64, panels: usize, order: usize) -> DMatrix<f64> {
    let rule = gauss_legendre(order);
    let width = (hi - lo) / panels as f64;
    let mut acc: Option<DMatrix<f64>> = None;
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * width;
        for &(x, w) in &rule {
            let v = f(mid + 0.5 * width * x) * (0.5 * width * w);
            acc = Some(match acc {
                Some(a) => a + v,
                None => v,
            });
        }
    }
    acc.expect("at least one panel")
}

/// `w² ∫₀^dt exp((dt-s) A_a) CCᵀ exp((dt-s) A_bᵀ) ds`.
pub fn noise_block(a_a: &DMatrix<f64>, a_b: &DMatrix<f64>, cct: &DMatrix<f64>, dt: f64, w: f64) -> DMatrix<f64> {
    integrate(
        |s| expm(&(a_a * (dt - s))) * cct * expm(&(a_b * (dt - s))).transpose(),
        0.0,
        dt,
        8,
        16,
    ) * (w * w)
}

/// `∫₀^dt exp((dt-s) A) b ds`.
pub fn drift(a: &DMatrix<f64>, b: &DVector<f64>, dt: f64) -> DVector<f64> {
    let v = integrate(|s| expm(&(a * (dt - s))) * DMatrix::from_column_slice(b.len(), 1, b.as_slice()), 0.0, dt, 8, 16);
    v.column(0).into_owned()
}

/// Transition matrix of the piecewise-constant system from time `s`
/// (inside interval `l`) to grid time `times[i]`, `i > l`.
pub fn transition(drifts: &[DMatrix<f64>], times: &[f64], l: usize, s: f64, i: usize) -> DMatrix<f64> {
    let mut phi = expm(&(&drifts[l] * (times[l + 1] - s)));
    for k in l + 1..i {
        phi = expm(&(&drifts[k] * (times[k + 1] - times[k]))) * phi;
    }
    phi
}

/// Two-time covariance `w² ∫_{t0}^{min(t_i,t_j)} Φ_a(t_i,s) CCᵀ Φ_b(t_j,s)ᵀ ds`
/// by quadrature over each grid interval.
pub fn two_time_covariance(
    drifts_a: &[DMatrix<f64>],
    drifts_b: &[DMatrix<f64>],
    cct: &DMatrix<f64>,
    w: f64,
    times: &[f64],
    i: usize,
    j: usize,
) -> DMatrix<f64> {
    let m = cct.nrows();
    let mut acc = DMatrix::zeros(m, m);
    for l in 0..i.min(j) {
        acc += integrate(
            |s| transition(drifts_a, times, l, s, i) * cct * transition(drifts_b, times, l, s, j).transpose(),
            times[l],
            times[l + 1],
            2,
            16,
        );
    }
    acc * (w * w)
}

/// `A = R - (‖R‖₁ + margin) I` for a random `R`: every eigenvalue has real part below `-margin`.
pub fn random_stable(rng: &mut impl Rng, m: usize, margin: f64) -> DMatrix<f64> {
    let r = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let shift = r.abs().row_sum().max() * rng.random_range(0.3..1.0) + margin;
    r - DMatrix::identity(m, m) * shift
}

/// Random symmetric positive semi-definite `B Bᵀ`.
pub fn random_psd(rng: &mut impl Rng, m: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose()
}

pub fn rel(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (x - y).norm() / y.norm().max(1e-300)
}

/// `A = A₀ + p·A₁ + f·A₂` with forcing `f` switching between intervals.
pub struct Switching {
    pub a0: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub obs: DMatrix<f64>,
}

impl Switching {
    fn drift(&self, params: &[f64], forcing: &[f64]) -> DMatrix<f64> {
        &self.a0 + &self.a1 * params[0] + &self.a2 * forcing[0]
    }
}

impl SimulationModel for Switching {
    fn id(&self) -> &str {
        "switching"
    }
    fn state_dim(&self) -> usize {
        self.a0.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.obs.nrows()
    }
    fn rhs(&self, state: &DVector<f64>, params: &[f64], forcing: &[f64]) -> DVector<f64> {
        self.drift(params, forcing) * state
    }
    fn linearize(&self, params: &[f64], forcing: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        Ok((self.drift(params, forcing), DVector::zeros(self.state_dim())))
    }
    fn observation(&self, _params: &[f64]) -> DMatrix<f64> {
        self.obs.clone()
    }
}

pub mod logspm_fixture {
    use dynemu_core::logspm::{default_metric, noise_spec, SyntheticForcing};
    use dynemu_core::{ConditionConfig, DesignSet, InputTrajectory, LogSpm, TimeGrid};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const RANGES: [(f64, f64); 8] = [
        (0.02, 0.06),
        (10.0, 50.0),
        (0.005, 0.02),
        (1.0, 5.0),
        (1.0, 5.0),
        (0.2, 0.4),
        (0.05, 0.1),
        (0.8, 2.0),
    ];

    pub fn model() -> LogSpm {
        LogSpm::new(1.0, 37.0, 37.0).unwrap()
    }

    pub fn forcing(n_steps: usize, seed: u64) -> Vec<Vec<f64>> {
        let gen = SyntheticForcing {
            p_wet_after_dry: 0.25,
            p_wet_after_wet: 0.6,
            mean_depth: 8.0,
            max_depth: 30.0,
            pet_mean: 3.0,
            pet_amplitude: 2.0,
            pet_period: 365.0,
        };
        let times: Vec<f64> = (0..=n_steps).map(|i| i as f64).collect();
        gen.generate(&times, seed).unwrap()
    }

    pub fn draw(rng: &mut ChaCha8Rng) -> Vec<f64> {
        RANGES.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect()
    }

    pub fn design(n: usize, n_steps: usize, seed: u64) -> (TimeGrid, DesignSet) {
        let grid = TimeGrid::uniform(0.0, 1.0, n_steps).unwrap();
        let f = forcing(n_steps, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let inputs = (0..n)
            .map(|_| InputTrajectory::new(draw(&mut rng), f.clone(), &grid).unwrap())
            .collect();
        (grid, DesignSet::new(inputs).unwrap())
    }

    pub fn config() -> ConditionConfig {
        let xi0 = DVector::from_vec(vec![50.0, 5.0, 2.0]);
        let cct = noise_spec(&xi0, 0.05).unwrap();
        ConditionConfig::new(xi0, cct, default_metric(&RANGES).unwrap())
    }
}
