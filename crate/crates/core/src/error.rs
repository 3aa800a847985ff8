use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incomplete sample: missing {0}")]
    IncompleteSample(PathBuf),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("annotation error: {0}")]
    Annotation(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("degenerate history: task {task} has a zero historical loss")]
    DegenerateHistory { task: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("numeric divergence at epoch {epoch}: {detail}")]
    NumericDivergence { epoch: usize, detail: String },
    #[error("no data: {0}")]
    NoData(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
