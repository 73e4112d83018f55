use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum FfmError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("stability error: {0}")]
    Stability(String),

    #[error("sequence of length {len} exceeds the chunk bound {max}; use chunked_scan")]
    ChunkBound { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("non-finite output at timestep {0}")]
    NonFiniteOutput(usize),

    #[error("training diverged (non-finite loss) at step {0}")]
    Diverged(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FfmError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        FfmError::Io { path: path.display().to_string(), source }
    }

    /// True for failures caused by numerics rather than by invalid input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FfmError::Stability(_) | FfmError::NonFiniteOutput(_) | FfmError::Diverged(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, FfmError>;
