use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Core(#[from] mfcrand::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for bad input or budgets, 1 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use mfcrand::Error as E;
        match self {
            CliError::Config { .. } => 2,
            CliError::Core(E::UnknownFamily(_) | E::TooLarge { .. }) => 2,
            CliError::Core(E::NonFinite { .. } | E::Monotonicity { .. }) => 1,
            CliError::Core(_) => 1,
            CliError::Io(_) | CliError::Json(_) => 1,
        }
    }
}
