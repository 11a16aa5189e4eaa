use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("ingest {path}: {msg}")]
    Ingest { path: String, msg: String },
    #[error("{stage}: {source}")]
    Numeric {
        stage: &'static str,
        #[source]
        source: sqr_core::Error,
    },
    #[error("i/o {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Ingest { .. } => 3,
            CliError::Numeric { .. } => 4,
        }
    }
}

/// Tags a core failure with the pipeline stage it came from.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<sqr_core::Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CliError::Numeric { stage, source: e.into() })
    }
}
