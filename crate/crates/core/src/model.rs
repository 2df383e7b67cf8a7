//! The simulation-model interface the emulator is built against.

use nalgebra::{DMatrix, DVector};

use crate::error::{EmuError, Result};
use crate::kernels::{eigendecompose, EigenDecomp};

/// A deterministic ODE model `ξ' = f(ξ, x)` together with its interval-wise
/// linearization `A(x) ξ + b(x)` and observation map `H`.
pub trait SimulationModel: Send + Sync {
    fn id(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn rhs(&self, state: &DVector<f64>, params: &[f64], forcing: &[f64]) -> DVector<f64>;

    fn linearize(&self, params: &[f64], forcing: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)>;

    /// Observation matrix, `obs_dim × state_dim`.
    fn observation(&self, params: &[f64]) -> DMatrix<f64>;

    /// Whether every replica is driven by the same forcing series.
    fn shared_forcing(&self) -> bool {
        false
    }

    /// Analytic eigendecomposition of the linearization, when the model has one.
    fn eigen(&self, _params: &[f64], _forcing: &[f64], _cond_threshold: f64) -> Option<Result<EigenDecomp>> {
        None
    }
}

/// Linearization and eigendecomposition for one interval.
pub fn interval_system(
    model: &dyn SimulationModel,
    params: &[f64],
    forcing: &[f64],
    cond_threshold: f64,
) -> Result<(DMatrix<f64>, DVector<f64>, EigenDecomp)> {
    let (a, b) = model.linearize(params, forcing)?;
    let ed = match model.eigen(params, forcing, cond_threshold) {
        Some(ed) => ed?,
        None => eigendecompose(&a, cond_threshold)?,
    };
    Ok((a, b, ed))
}

/// A model that is already linear: `A = A₀ + Σ_k p_k A_k`, `b = b₀ + F x_forcing`.
///
/// Used for tests and demonstrations where the emulator's prior is exact.
#[derive(Debug, Clone)]
pub struct AffineModel {
    pub a0: DMatrix<f64>,
    pub a_params: Vec<DMatrix<f64>>,
    pub b0: DVector<f64>,
    pub b_forcing: DMatrix<f64>,
    pub obs: DMatrix<f64>,
}

impl AffineModel {
    pub fn new(
        a0: DMatrix<f64>,
        a_params: Vec<DMatrix<f64>>,
        b0: DVector<f64>,
        b_forcing: DMatrix<f64>,
        obs: DMatrix<f64>,
    ) -> Result<Self> {
        let m = a0.nrows();
        let square = |x: &DMatrix<f64>| x.nrows() == m && x.ncols() == m;
        if !square(&a0)
            || !a_params.iter().all(square)
            || b0.len() != m
            || b_forcing.nrows() != m
            || obs.ncols() != m
            || obs.nrows() == 0
        {
            return Err(EmuError::DimensionMismatch("affine model blocks disagree".into()));
        }
        Ok(AffineModel {
            a0,
            a_params,
            b0,
            b_forcing,
            obs,
        })
    }

    fn drift(&self, params: &[f64]) -> DMatrix<f64> {
        let mut a = self.a0.clone();
        for (p, ak) in params.iter().zip(&self.a_params) {
            a += ak * *p;
        }
        a
    }

    fn offset(&self, forcing: &[f64]) -> DVector<f64> {
        let mut b = self.b0.clone();
        for (j, f) in forcing.iter().enumerate().take(self.b_forcing.ncols()) {
            b += self.b_forcing.column(j) * *f;
        }
        b
    }
}

impl SimulationModel for AffineModel {
    fn id(&self) -> &str {
        "affine"
    }

    fn state_dim(&self) -> usize {
        self.a0.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.obs.nrows()
    }

    fn rhs(&self, state: &DVector<f64>, params: &[f64], forcing: &[f64]) -> DVector<f64> {
        self.drift(params) * state + self.offset(forcing)
    }

    fn linearize(&self, params: &[f64], forcing: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        Ok((self.drift(params), self.offset(forcing)))
    }

    fn observation(&self, _params: &[f64]) -> DMatrix<f64> {
        self.obs.clone()
    }
}
