use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("map inversion did not converge at y = {point:?} (last residual {residual:.3e})")]
    Inversion { point: Vec<f64>, residual: f64 },

    #[error("solution blew up at step {step}: |u|_0 = {norm:.3e} exceeds {threshold:.3e}")]
    BlowUp { step: usize, norm: f64, threshold: f64 },

    #[error("expression error at column {column}: {message}")]
    Expression { column: usize, message: String },

    #[error("problem file: {0}")]
    Problem(String),

    #[error("config error [{code}]{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config {
        code: ConfigErrorCode,
        line: Option<usize>,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Distinct diagnostics for configuration failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigErrorCode {
    Syntax,
    UnknownKey,
    MissingKey,
    MissingFile,
    Invariant,
}

impl ConfigErrorCode {
    pub fn id(self) -> &'static str {
        match self {
            ConfigErrorCode::Syntax => "E100",
            ConfigErrorCode::UnknownKey => "E101",
            ConfigErrorCode::MissingKey => "E102",
            ConfigErrorCode::MissingFile => "E103",
            ConfigErrorCode::Invariant => "E104",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConfigErrorCode::Syntax => "syntax",
            ConfigErrorCode::UnknownKey => "unknown-key",
            ConfigErrorCode::MissingKey => "missing-key",
            ConfigErrorCode::MissingFile => "missing-file",
            ConfigErrorCode::Invariant => "invariant",
        }
    }
}

impl std::fmt::Display for ConfigErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.id(), self.name())
    }
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
