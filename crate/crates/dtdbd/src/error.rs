use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An API contract was broken by the caller (non-scalar loss, negative
    /// weight, negative reversal strength, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed runtime input: shape mismatch, out-of-range label, ...
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration value is out of its valid range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset parsing or schema problem; `line` is 1-based when known.
    #[error("data error{}: {msg}", line.map(|n| format!(" at line {n}")).unwrap_or_default())]
    Data { line: Option<usize>, msg: String },

    /// A gradient came back NaN; training aborts rather than corrupting
    /// the named parameter.
    #[error("NaN gradient for parameter `{param}`")]
    NanGradient { param: String },

    /// Report rendering failed (inconsistent inputs).
    #[error("render error: {0}")]
    Render(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Data { line, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
