//! Neural estimator of per-lag redundancy, uniqueness and synergy.
//!
//! Three lag-conditioned discriminators predict the target from the first
//! source, the second source and both. Per-class q-heads then define an
//! alignment tensor between batch samples; after Sinkhorn normalization it
//! is a coupling with the discriminator-implied source marginals, trained
//! to carry as little joint information about the target as possible.
//! The decomposition follows from the discriminator MI terms and the MI of
//! that coupling.

mod data;
mod error;
mod estimate;
mod model;
mod sinkhorn;

pub use data::{LagSamples, MultiLagData};
pub use error::{Error, Result};
pub use estimate::{estimate_rus_multilag, lag_estimates, LagEstimate, CLAMP_TOLERANCE};
pub use model::{fit, train_discriminators, Branch, EstimatorConfig, EstimatorModel, Stage, TrainingHistory};
pub use sinkhorn::{alignment_from_embeddings, sinkhorn_normalize, uniform_marginals, AlignmentTensor, SinkhornOutcome};
