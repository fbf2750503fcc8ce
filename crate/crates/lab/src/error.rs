use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] hra_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl LabError {
    /// 2 for anything the user can fix in the config, 3 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            LabError::Config(_) | LabError::Core(hra_core::Error::Config(_)) => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
