use thiserror::Error;

/// Errors surfaced by the gap-quantification pipeline.
#[derive(Error, Debug)]
pub enum SimGapError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("cover size error: requested grid has {count} centers, cap is {cap}")]
    CoverSize { count: u128, cap: u64 },

    #[error("training error: {0}")]
    Training(String),

    #[error("certificate error: {0}")]
    Certificate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {cause}")]
    Stage { stage: String, cause: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, SimGapError>;
