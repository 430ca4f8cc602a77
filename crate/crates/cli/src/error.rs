use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

pub fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

pub fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn backend(e: ttasv::backends::BackendError) -> CliError {
    use ttasv::backends::BackendError as B;
    match e {
        B::Precondition(_) | B::Audio(_) | B::Io(_) => CliError::Data(e.to_string()),
        _ => CliError::Backend(e.to_string()),
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
