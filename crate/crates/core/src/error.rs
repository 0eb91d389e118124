use thiserror::Error;

use crate::distributions::JointDistribution;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no data: {0}")]
    EmptyData(String),
    #[error("lag {lag} out of range for sequence length {len} (need lag <= n - 2)")]
    LagRange { lag: usize, len: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("modality {0} is continuous; discretize it before exact estimation")]
    NotDiscrete(String),
    #[error("estimation: {0}")]
    Estimation(String),
    #[error("solver did not converge after {iterations} iterations (objective {objective}, residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        objective: f64,
        residual: f64,
        best: Box<JointDistribution>,
    },
    #[error("invariant violated: {component} = {value:e}")]
    Invariant { component: &'static str, value: f64 },
    #[error("spec: {0}")]
    Spec(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
