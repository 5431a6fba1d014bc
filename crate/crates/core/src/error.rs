use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A physical or numerical parameter is outside its valid domain.
    #[error("invalid {field}: {reason}")]
    Domain { field: &'static str, reason: String },

    /// Configuration could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// Input data is malformed or insufficient.
    #[error("data error: {0}")]
    Data(String),

    /// The calibration constraint set admits no solution.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A linear system could not be solved.
    #[error("singular system: {0}")]
    Singular(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 for configuration problems, 3 for data problems, 4 for infeasibility.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain { .. } => 2,
            Error::Data(_) | Error::Io { .. } | Error::Singular(_) => 3,
            Error::Infeasible(_) => 4,
        }
    }
}
