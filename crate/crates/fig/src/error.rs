use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to name the
/// offending op, graph, line, or file in the message.
#[derive(Debug, Error)]
pub enum FigError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{rule}, graph {graph}")]
    Validation { graph: usize, rule: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, FigError>;

impl FigError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FigError::Io {
            path: path.into(),
            source,
        }
    }
}
