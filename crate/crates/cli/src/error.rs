use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] histosynth_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad input or usage, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use histosynth_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::EmptySet(_) | E::Config(_) | E::InvalidLabel { .. } | E::Alignment { .. }) => 2,
            _ => 1,
        }
    }
}
