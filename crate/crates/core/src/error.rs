//! Error taxonomy shared across the crate.
//!
//! Each variant maps to a process exit code used by the CLI: config errors
//! exit 2, schedule errors exit 3, benchmark errors exit 4, everything else 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration could not be parsed or violates a field invariant.
    #[error("config error: {0}")]
    Config(String),

    /// A reduction schedule is out of bounds for the model or workload.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// The benchmark harness cannot produce a trustworthy measurement.
    #[error("benchmark error: {0}")]
    Benchmark(String),

    /// An input value is malformed (non-finite entries, shape mismatch).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An input is too small for the operation to be meaningful.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Mask rendering was asked for data the trace does not carry.
    #[error("render error: {0}")]
    Render(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI layer.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Schedule(_) => 3,
            Error::Benchmark(_) => 4,
            _ => 1,
        }
    }

    /// Stable machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Schedule(_) => "schedule",
            Error::Benchmark(_) => "benchmark",
            Error::InvalidInput(_) => "invalid_input",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::Render(_) => "render",
            Error::Io(_) => "io",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_contract() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Schedule("x".into()).exit_code(), 3);
        assert_eq!(Error::Benchmark("x".into()).exit_code(), 4);
        assert_eq!(Error::InvalidInput("x".into()).exit_code(), 1);
    }
}
