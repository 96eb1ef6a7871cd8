//! Crate-wide error type.
//!
//! One enum covers every failure mode the engine can hit; the CLI maps
//! variants onto process exit codes (config errors exit 2, numeric
//! failures exit 3, invariant violations exit 4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Operand dimensions do not conform.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A numerical procedure failed (non-convergence, non-PD matrix, NaN loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A run configuration is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A run-time invariant the engine guarantees was observed broken.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A prototype batch is missing one or more classes.
    #[error("missing class(es) in prototype batch: {}", format_ids(.0))]
    MissingClasses(Vec<usize>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn format_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
