use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        source: mpq_core::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("size accounting: {0}")]
    Size(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for configuration errors, 3 for numeric
    /// failures, 4 for I/O and format errors.
    pub fn exit_code(&self) -> i32 {
        use mpq_core::Error as E;
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Stage { source, .. } => match source {
                E::InvalidArgument(_)
                | E::UnsupportedBits(_)
                | E::Infeasible(_)
                | E::Label { .. }
                | E::Dimension(_) => 2,
                _ => 3,
            },
            HarnessError::Size(_) => 3,
            HarnessError::Io { .. } | HarnessError::Format { .. } | HarnessError::Checkpoint(_) => 4,
        }
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for mpq_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| HarnessError::Stage { stage, source })
    }
}
