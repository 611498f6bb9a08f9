use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid dimensions: {0}")]
    Dimension(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("line {line}: expected KEY=VALUE, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("{0}")]
    Invalid(String),
}

/// A NaN or infinity surfaced somewhere in the numeric pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("numeric fault in {stage}: non-finite value {value}")]
pub struct NumericFault {
    pub stage: &'static str,
    pub value: f64,
}

impl NumericFault {
    pub fn new(stage: &'static str, value: f64) -> Self {
        Self { stage, value }
    }
}

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("{path}: expected {expected} bytes ({params} parameters), found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
        params: usize,
    },
    #[error("embedded weights hold {actual} bytes, configuration needs {expected}")]
    BakedSizeMismatch { expected: usize, actual: usize },
    #[error("header parse error: {0}")]
    HeaderParse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("class directory missing: {0}")]
    MissingClass(PathBuf),
    #[error("class `{label}` has {found} images; needs at least {needed} ({validation} reserved for validation)")]
    ClassTooSmall {
        label: String,
        found: usize,
        needed: usize,
        validation: usize,
    },
    #[error("{path}: malformed PPM: {reason}")]
    MalformedPpm { path: PathBuf, reason: String },
    #[error("{path}: unsupported PPM maxval {maxval} (only 255)")]
    UnsupportedMaxval { path: PathBuf, maxval: u32 },
    #[error("{path}: truncated pixel data ({actual} of {expected} bytes)")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("image buffer is {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("source side {source_side} is smaller than network input {input_size}")]
    SourceTooSmall {
        source_side: usize,
        input_size: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numeric(#[from] NumericFault),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("buffer `{name}` has length {actual}, expected {expected}")]
    Shape {
        name: &'static str,
        expected: usize,
        actual: usize,
    },
}
