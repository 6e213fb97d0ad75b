use std::fmt;

/// Stage of the privacy accounting chain, used to report where verification failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Precondition,
    PerStep,
    Amplification,
    Composition,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Precondition => "precondition",
            Stage::PerStep => "per-step gaussian mechanism",
            Stage::Amplification => "subsampling amplification",
            Stage::Composition => "advanced composition",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid weight matrix: {0}")]
    Weights(String),

    #[error("{name} out of domain: {detail}")]
    Domain { name: &'static str, detail: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("iteration count {iterations} is below the minimum admissible {minimum} (q^2 eps^2 / (4 p^2))")]
    TooFewIterations { iterations: u64, minimum: u64 },

    #[error("privacy verification failed at {stage}: {detail}")]
    Verification { stage: Stage, detail: String },

    #[error("non-finite iterate at iteration {iteration} (agent {agent})")]
    NonFinite { iteration: u64, agent: usize },

    #[error("non-finite input value at index {0}")]
    NonFiniteInput(usize),

    #[error("unknown sender {sender} for agent {agent}")]
    UnknownSender { agent: usize, sender: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("solver stopped after {iterations} iterations with gradient norm {grad_norm:e}")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("{failed} of {total} runs failed:\n{report}")]
    RunFailures { failed: usize, total: usize, report: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            name,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
