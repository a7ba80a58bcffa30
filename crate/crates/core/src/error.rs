use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GlcfError>;

#[derive(Debug, Error)]
pub enum GlcfError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl GlcfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GlcfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            GlcfError::Config(_) | GlcfError::Json(_) => "bad_config",
            GlcfError::MissingInput(_) | GlcfError::Io { .. } | GlcfError::Image { .. } => {
                "missing_input"
            }
            GlcfError::NumericFault(_) => "numeric_fault",
            GlcfError::Contract(_)
            | GlcfError::CorruptArchive(_)
            | GlcfError::UnsupportedFormat(_)
            | GlcfError::Tensor(_) => "contract_violation",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "bad_config" => 2,
            "missing_input" => 3,
            "numeric_fault" => 4,
            _ => 5,
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> GlcfError {
    GlcfError::Config(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> GlcfError {
    GlcfError::Contract(msg.into())
}
