use std::path::PathBuf;

use thiserror::Error;

use crate::units::SimTime;

#[derive(Debug, Error)]
pub enum PetError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid ECN configuration: {0}")]
    InvalidEcn(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("flow {0} is not complete")]
    IncompleteFlow(u32),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("handler panicked while dispatching {kind} event (seq {seq}) at {time}: {msg}")]
    HandlerPanic {
        time: SimTime,
        seq: u64,
        kind: &'static str,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PetError>;
