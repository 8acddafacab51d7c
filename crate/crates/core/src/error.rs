use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },

    #[error("duplicate declaration of `{0}`")]
    Duplicate(String),

    #[error("undeclared name `{0}`")]
    Undeclared(String),

    #[error("descriptor: {0}")]
    Descriptor(String),

    #[error("page-table build: {0}")]
    Build(String),

    #[error("built-in `{name}`: {msg}")]
    Builtin { name: String, msg: String },

    #[error("test format: {0}")]
    Format(String),

    #[error("cannot decode `{line}`: {msg}")]
    Decode { line: String, msg: String },

    #[error("execution: {0}")]
    Exec(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("enumeration: {0}")]
    Enumerate(String),

    #[error("candidate budget exhausted after {0} candidates")]
    Budget(usize),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn syntax(line: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Syntax { line, col, msg: msg.into() }
}
