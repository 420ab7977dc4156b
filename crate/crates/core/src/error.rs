use thiserror::Error;

/// Errors produced by the simulation, estimation, attack, and training layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("unobservable measurement set: {0}")]
    Unobservable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("attack infeasible: {0}")]
    Infeasible(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error channel.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Topology(_) => "topology",
            Error::Dimension { .. } => "dimension",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Singular(_) => "singular",
            Error::Unobservable(_) => "unobservable",
            Error::Config(_) => "config",
            Error::Infeasible(_) => "infeasible",
            Error::TrainingDiverged(_) => "training_diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
