//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rank {rank} out of range 1..={max}{context}")]
    Rank {
        rank: usize,
        max: usize,
        context: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("comparison error: {0}")]
    Compare(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn rank(rank: usize, max: usize) -> Self {
        Error::Rank {
            rank,
            max,
            context: String::new(),
        }
    }

    pub fn rank_in(rank: usize, max: usize, context: impl Into<String>) -> Self {
        Error::Rank {
            rank,
            max,
            context: format!(" ({})", context.into()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
