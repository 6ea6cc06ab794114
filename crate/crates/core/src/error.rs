use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("environment: {0}")]
    Environment(String),

    #[error("external tool `{tool}` failed: {message}")]
    External { tool: String, message: String },

    #[error("plugin `{plugin}` failed: {message}")]
    Plugin { plugin: String, message: String },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("training: {0}")]
    Training(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage} ({name}): {source}")]
    Stage {
        stage: usize,
        name: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("frame {index}: {source}")]
    AtFrame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("safetensors: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short machine-parsable class name, used by the CLI's error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "invalid-shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Io { .. } | Error::Image { .. } => "io",
            Error::Environment(_) => "environment",
            Error::External { .. } => "external",
            Error::Plugin { .. } => "plugin",
            Error::Conflict(_) => "conflict",
            Error::NotFound(_) => "not-found",
            Error::Training(_) => "training",
            Error::Config(_) => "config",
            Error::Stage { source, .. } | Error::AtFrame { source, .. } => source.class(),
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Safetensors(_) => "checkpoint",
        }
    }
}
