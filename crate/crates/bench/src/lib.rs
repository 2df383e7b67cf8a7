//! Fixtures shared by the benchmarks: a logSPM design on a daily grid.

use dynemu_core::logspm::{default_metric, noise_spec, SyntheticForcing};
use dynemu_core::simulator::integrate_ode;
use dynemu_core::{
    condition, ConditionConfig, ConditionedEmulator, DesignSet, InputTrajectory, LogSpm, ObservationSet,
    SimulationModel, TimeGrid,
};
use nalgebra::DVector;

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

pub struct Fixture {
    pub model: LogSpm,
    pub grid: TimeGrid,
    pub design: DesignSet,
    pub runs: ObservationSet,
    pub config: ConditionConfig,
    /// Inputs not in the design, for emulation.
    pub online: Vec<InputTrajectory>,
}

/// Deterministic low-discrepancy point in the parameter box.
fn point(k: usize) -> Vec<f64> {
    const PRIMES: [f64; 8] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];
    RANGES
        .iter()
        .zip(PRIMES)
        .map(|(&(lo, hi), p)| {
            // golden-ratio style sequence, one irrational step per coordinate
            let u = ((k as f64 + 1.0) * p.sqrt()).fract();
            lo + (hi - lo) * u
        })
        .collect()
}

pub fn fixture(n: usize, n_steps: usize) -> Fixture {
    let model = LogSpm::new(1.0, 37.0, 37.0).unwrap();
    let grid = TimeGrid::uniform(0.0, 1.0, n_steps).unwrap();
    let forcing = SyntheticForcing {
        p_wet_after_dry: 0.25,
        p_wet_after_wet: 0.6,
        mean_depth: 8.0,
        max_depth: 30.0,
        pet_mean: 3.0,
        pet_amplitude: 2.0,
        pet_period: 365.0,
    }
    .generate(grid.times(), 7)
    .unwrap();
    let make = |k| InputTrajectory::new(point(k), forcing.clone(), &grid).unwrap();
    let design = DesignSet::new((0..n).map(make).collect()).unwrap();
    let online = (n..n + 4).map(make).collect();
    let xi0 = DVector::from_vec(vec![50.0, 5.0, 2.0]);
    let runs = ObservationSet::new(
        design
            .inputs
            .iter()
            .map(|x| {
                let h = model.observation(&x.params);
                integrate_ode(&model, x, &grid, &xi0, 10).unwrap().iter().map(|s| &h * s).collect()
            })
            .collect(),
    )
    .unwrap();
    let config = ConditionConfig::new(xi0.clone(), noise_spec(&xi0, 0.05).unwrap(), default_metric(&RANGES).unwrap());
    Fixture {
        model,
        grid,
        design,
        runs,
        config,
        online,
    }
}

impl Fixture {
    pub fn condition(&self) -> ConditionedEmulator {
        condition(&self.model, &self.design, &self.runs, &self.grid, &self.config).unwrap()
    }
}
