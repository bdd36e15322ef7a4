use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the subsystem that raises them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tables: {0}")]
    Table(String),
    #[error("tables: parse error at row {row}: {message}")]
    CsvParse { row: usize, message: String },
    #[error("formula: parse error at position {position}: {message}")]
    FormulaParse { position: usize, message: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("compiler: {0}")]
    Compile(String),
    #[error("diff: {0}")]
    Diff(String),
    #[error("diff: numeric domain violation: {0}")]
    Domain(String),
    #[error("model: {0}")]
    Model(String),
    #[error("margins: {0}")]
    Margins(String),
    #[error("inference: {0}")]
    Inference(String),
    #[error("cli: {0}")]
    Cli(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
