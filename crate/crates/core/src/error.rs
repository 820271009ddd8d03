use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape { expected: Vec<usize>, found: Vec<usize> },

    #[error("agent count mismatch: expected {expected}, found {found}")]
    AgentCount { expected: usize, found: usize },

    #[error("scenario infeasible: no valid placement after {attempts} attempts")]
    ScenarioInfeasible { attempts: usize },

    #[error("training diverged: non-finite value in `{parameter}`")]
    Divergence { parameter: String },

    #[error("controller produced a non-finite input at step {step}")]
    Controller { step: usize },

    #[error(
        "conformal radii are infinite at steps {steps:?}; calibration needs at least {min_calibration} episodes for this delta_bar"
    )]
    InfiniteRadii { steps: Vec<usize>, min_calibration: usize },

    #[error("missing artifact {path}: run `{subcommand}` first")]
    MissingArtifact { path: PathBuf, subcommand: &'static str },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
