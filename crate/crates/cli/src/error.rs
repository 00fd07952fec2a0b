use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),

    #[error("artifact integrity: {0}")]
    Integrity(String),

    #[error("no verified levels to work from: {0}")]
    NotVerified(String),

    #[error(transparent)]
    Core(#[from] zubov::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_FALSIFIED: i32 = 2;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_MISSING: i32 = 5;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use zubov::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Missing(_) | CliError::Integrity(_) => EXIT_MISSING,
            CliError::NotVerified(_) => EXIT_FALSIFIED,
            CliError::Core(e) => match e {
                E::Config(_) | E::UnknownSystem(_) | E::InvalidDomain(_) => EXIT_CONFIG,
                E::Integrity(_) | E::Schema { .. } => EXIT_MISSING,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
                _ => EXIT_FAILURE,
            },
            CliError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            _ => EXIT_FAILURE,
        }
    }
}
