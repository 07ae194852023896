use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] abnn::Error),

    #[error("configuration: {0}")]
    Config(String),

    #[error("bad config JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV output: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("unsupported checkpoint: {0}")]
    CheckpointVersion(String),

    #[error("corrupt checkpoint shape table: {0}")]
    CorruptShapeTable(String),

    #[error("checkpoint truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("checkpoint tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is for model {found:?}, expected {expected:?}")]
    ModelMismatch { expected: String, found: String },

    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<CliError>,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Wraps an error with the experiment step it came from.
    pub fn in_run(self, context: impl Into<String>) -> Self {
        Self::Run {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| CliError::Write { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(wrap)?;
    }
    std::fs::write(path, bytes).map_err(wrap)
}
