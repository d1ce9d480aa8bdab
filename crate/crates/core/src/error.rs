use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("k = {k} out of range [1, {classes}]")]
    KOutOfRange { k: usize, classes: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("wrong value mode: {0}")]
    WrongValueMode(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("region does not intersect the map")]
    EmptyIntersection,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("heterogeneous map shapes: {0}")]
    HeterogeneousShapes(String),

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error("no usable images: {0}")]
    NoImages(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
