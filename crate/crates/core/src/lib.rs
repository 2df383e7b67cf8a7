//! Dynamic emulation of ODE simulation models.
//!
//! A model's interval-wise linearization, driven by noise that is coupled
//! across replicas according to input distance, is conditioned on design
//! runs once ([`conditioner::condition`]); emulating a new input is then a
//! single forward recursion ([`emulator::emulate_mean`]).

pub mod artifact;
pub mod conditioner;
pub mod coupling;
pub mod covariance;
pub mod emulator;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod logspm;
pub mod model;
pub mod simulator;

pub use conditioner::{condition, ConditionConfig, ConditionedEmulator, ObservationSet};
pub use coupling::{DesignSet, InputTrajectory, MetricFlavor, MetricSpec};
pub use covariance::{CovarianceBlocks, MeanTrajectory, ReplicaKernels, TimeGrid};
pub use emulator::{d_value, emulate, emulate_mean, emulate_variance, EmulationResult};
pub use error::{EmuError, Result};
pub use kernels::EigenDecomp;
pub use logspm::{LogSpm, LogSpmParams};
pub use model::{AffineModel, SimulationModel};
