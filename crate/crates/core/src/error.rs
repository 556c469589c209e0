use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("instance id {0} not present in mask")]
    NotFound(u32),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("could only place {achieved} of {requested} cells")]
    Placement { requested: usize, achieved: usize },

    #[error("no eligible positive source pixel")]
    NoPositive,

    #[error("state error: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Tags an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// True for errors caused by invalid user configuration.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
