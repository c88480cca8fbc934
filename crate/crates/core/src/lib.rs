//! Kinetic limits of harmonic lattice dynamics: force fields, exact evolution,
//! random initial data, Monte Carlo statistics and the limiting transport picture.

pub mod error;
pub mod evolution;
pub mod experiments;
pub mod export;
pub mod fft;
pub mod grid;
pub mod kinetic;
pub mod lattice;
pub mod linalg;
pub mod mc;
pub mod random_fields;
pub mod statistics;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use grid::LatticeSpec;
pub use lattice::{
    critical_set_mask, validate_conditions, ConditionReport, ConditionStatus, ConditionTolerances,
    CriticalSet, DispersionTable, ForceField,
};
pub use evolution::{
    decay_diagnostic, energy, evolve, DecayReport, GreenFunction, PhaseField, PropagatorTable,
};
pub use experiments::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutcome, Verdict};
pub use export::{diff_tables, DiffReport, EstimateTable};
pub use kinetic::{
    limit_covariance, local_covariance, project_wigner, stationarity_check, transport_evolve,
    transport_pde_oracle, LimitCovariance, LocalCovariance, RGrid, TransportState,
};
pub use random_fields::{
    sample_homogeneous, sample_slow_family, validate_profile, HomogeneousSampler,
    HomogeneousSpectrum, NoiseKind, ProfileSpec, SlowFamilyConfig, SlowFamilySampler,
    SlowProfile,
};
pub use statistics::{
    fourth_cumulant_test, AFieldMap, CovarianceAccumulator, PairEstimate, Probe, WignerAccumulator,
    WignerEstimate, WignerWindow,
};
