use thiserror::Error;

use crate::state::Position;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid decoding state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("state source exhausted at step {step} with {remaining} positions still masked")]
    TruncatedRun { step: usize, remaining: usize },

    #[error("schedule exhausted after {steps} steps with {remaining} positions still masked")]
    ScheduleExhausted { steps: usize, remaining: usize },

    #[error("policy contract violated at step {step}: {reason}")]
    PolicyContract { step: usize, reason: String },

    #[error("state source contract violated at step {step}: {reason}")]
    SourceContract { step: usize, reason: String },

    #[error("position {position} has no attention vector")]
    MissingAttention { position: Position },
}
