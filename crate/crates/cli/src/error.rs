use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("missing {file}; run `cfgx {producer}` first")]
    Missing { file: String, producer: &'static str },
    #[error("{file}: {source}")]
    Artifact {
        file: String,
        #[source]
        source: cfgx::Error,
    },
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },
    #[error(transparent)]
    Core(#[from] cfgx::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Artifact { source, .. } | CliError::Core(source) => core_code(source),
            _ => EXIT_VALIDATION,
        }
    }

    pub(crate) fn format(file: impl Into<String>, msg: impl ToString) -> Self {
        CliError::Format {
            file: file.into(),
            msg: msg.to_string(),
        }
    }
}

fn core_code(e: &cfgx::Error) -> u8 {
    match e {
        cfgx::Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}
