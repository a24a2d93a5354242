use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest is missing required column `{0}`")]
    MissingColumn(String),
    #[error("manifest line {line}: class `{value}` is not in 1..=7")]
    InvalidClass { line: usize, value: String },
    #[error("manifest line {line}: empty patient id")]
    EmptyPatient { line: usize },
    #[error("file listed in manifest does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: image is {image_h}x{image_w} but segmentation is {seg_h}x{seg_w}")]
    DimensionMismatch {
        path: PathBuf,
        image_h: u32,
        image_w: u32,
        seg_h: u32,
        seg_w: u32,
    },
    #[error("{path}: segmentation color {color:?} is not in the label color map")]
    UnmappedColor { path: PathBuf, color: [u8; 3] },
    #[error("{0}: nucleus mask has no foreground pixels")]
    EmptyNucleus(PathBuf),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot build {k} folds from {patients} patients")]
    TooFewPatients { patients: usize, k: usize },
    #[error("fold index {index} out of range for k = {k}")]
    FoldOutOfRange { index: usize, k: usize },
    #[error("sample at position {0} has no provenance")]
    MissingProvenance(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("backward called without a preceding training-mode forward (layer `{0}`)")]
    BackwardWithoutForward(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("patient-level leakage between training and validation: {0}")]
    Leakage(String),
    #[error("metric needs both classes present")]
    SingleClass,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::FoldOutOfRange { .. } => ErrorKind::Config,
            Error::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
