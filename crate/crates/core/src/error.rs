use thiserror::Error;

pub type Result<T> = std::result::Result<T, EmuError>;

#[derive(Debug, Error)]
pub enum EmuError {
    /// Eigenvector matrix is (numerically) singular, or the eigen solver failed.
    #[error("matrix is not diagonalizable{}: condition estimate {cond:e}", fmt_interval(*.interval))]
    NonDiagonalizable { interval: Option<usize>, cond: f64 },

    #[error("degenerate eigenvalues {0:e} and {1:e}")]
    DegenerateEigenvalues(f64, f64),

    #[error("matrix is not positive definite (tried jitter schedule {tried:?})")]
    NotPositiveDefinite { tried: Vec<f64> },

    #[error("inputs are defined on different time grids")]
    MismatchedGrids,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("state left the finite range at t = {time}, component {component}")]
    NonFinite { time: f64, component: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("artifact format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<EmuError>,
    },
}

fn fmt_interval(interval: Option<usize>) -> String {
    match interval {
        Some(i) => format!(" at interval {i}"),
        None => String::new(),
    }
}

impl EmuError {
    pub fn in_phase(self, phase: &'static str) -> Self {
        EmuError::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through phase annotations.
    pub fn root(&self) -> &EmuError {
        match self {
            EmuError::Phase { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures of the numerical kind (factorization or eigen solve).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            EmuError::NonDiagonalizable { .. }
                | EmuError::DegenerateEigenvalues(..)
                | EmuError::NotPositiveDefinite { .. }
                | EmuError::NonFinite { .. }
        )
    }

    pub(crate) fn with_interval(self, l: usize) -> Self {
        match self {
            EmuError::NonDiagonalizable { cond, .. } => EmuError::NonDiagonalizable {
                interval: Some(l),
                cond,
            },
            EmuError::DegenerateEigenvalues(..) => EmuError::NonDiagonalizable {
                interval: Some(l),
                cond: f64::INFINITY,
            },
            e => e,
        }
    }
}
