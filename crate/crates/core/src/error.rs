use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric positive definite (failed at pivot {pivot})")]
    NotSpd { pivot: usize },

    #[error("rollout aborted at step {step}: {reason}")]
    RolloutAbort { step: usize, reason: String },

    #[error("no admissible grasp: {0}")]
    NoGrasp(String),

    #[error("inverse kinematics did not converge after {iterations} iterations (position error {position_error:.3e} m, angle error {angle_error:.3e} rad)")]
    NoIk {
        iterations: usize,
        position_error: f64,
        angle_error: f64,
    },

    #[error("trajectory rejected after {attempts} attempts: {reason}")]
    TrajectoryRejected { attempts: usize, reason: String },

    #[error("data generation failed: {0}")]
    Datagen(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("training aborted at round {round}: {reason}")]
    TrainingAbort { round: usize, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
