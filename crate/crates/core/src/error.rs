use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, names or hyperparameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (empty batch, bad action, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value showed up during optimization.
    #[error("training diverged: {0}")]
    Training(String),

    /// The vector field produced a non-finite velocity.
    #[error("integration failed at Euler step {step}: {detail}")]
    Integration { step: usize, detail: String },

    /// The brute-force return oracle refused the request.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub(crate) fn with_path(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| with_path(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| with_path(path, e))
}
