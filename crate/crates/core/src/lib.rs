//! Off-policy evaluation and optimization of discrete pricing policies.
//!
//! The crate implements the classical inverse-propensity-score (IPS)
//! estimator and its kernelized variant, where a local regression in the
//! action variable maps logged actions onto an arbitrary evaluation grid.
//! Around the estimators sit a synthetic travel-insurance market with exact
//! expected rewards ([`simenv`]), three policy optimizers ([`optimize`]) and
//! seeded experiment runners ([`harness`]).

pub mod error;
pub mod estimators;
pub mod harness;
pub mod kernel;
pub mod numeric;
pub mod optimize;
pub mod seeding;
pub mod simenv;
pub mod types;

pub use error::{Error, Result};
pub use estimators::{EstimatorTag, RewardModel, ValueEstimate};
pub use kernel::{
    BasisSpec, ConditionalMoments, CovarianceMatrix, DesignMatrixPair, KernelMatrix, KernelSet,
    WeightMatrix,
};
pub use simenv::{EnvConfig, EnvironmentParams, RawCovariates, SimulatedRecord, Simulation};
pub use types::{
    assignment_value, empirical_value, ActionSpace, ConstantPolicy, DeterministicPolicy,
    FeatureVector, FixedDistributionPolicy, LearningSample, LoggedSample, Policy,
    StochasticPolicy,
};
