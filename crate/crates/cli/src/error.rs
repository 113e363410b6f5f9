use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A stage ran before the stage that produces its inputs.
    #[error("stage `{stage}` needs {} from stage `{upstream}`; run `{upstream}` first", artifact.display())]
    MissingArtifact {
        stage: &'static str,
        upstream: &'static str,
        artifact: PathBuf,
    },
}

impl CliError {
    /// Process exit code: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::MissingArtifact { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<tapercast::Error> for CliError {
    fn from(e: tapercast::Error) -> Self {
        match e {
            tapercast::Error::Config(_) => CliError::Config(e.to_string()),
            tapercast::Error::Numerical(_) => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;
