//! Information-theoretic core: discrete joint distributions, exact
//! redundancy/uniqueness/synergy decomposition, its per-lag temporal
//! counterpart, and generators of sequences with planted interactions.

pub mod distributions;
mod error;
pub mod info;
pub mod pid;
pub mod sequence_csv;
pub mod synthetic;
pub mod temporal;

pub use distributions::{
    build_lag_dataset, conditional_joint, quantize_equal_frequency, Context, ContextJoint,
    JointDistribution, LagDataset, Modality, ModalityData, SequenceBundle,
};
pub use error::{Error, Result};
pub use pid::{decompose, decompose_with, solve_q_star, PidResult, SolverDiagnostics, SolverOptions};
pub use synthetic::{generate, ground_truth_rus, ModalitySpec, PlantSpec, Rule};
pub use temporal::{
    aggregate_uniqueness, compute_trajectory, decompose_lag, directed_information, LagDecomposition,
    RusTrajectory, TemporalOptions,
};
