use std::fmt;
use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the failure modes of the
/// geometry, encoder, autograd and dataset layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    TooFewPoints { have: usize, need: usize },
    InvalidCount { requested: usize, available: usize },
    EmptySet,
    EmptyBank,
    LengthMismatch { left: usize, right: usize },
    DimensionMismatch { expected: usize, actual: usize },
    BadDimension { dim: usize },
    ShapeMismatch(String),
    NonScalarLoss { shape: Vec<usize> },
    DoubleBackward,
    BadRatio(f64),
    BadLabel { label: u8, num_classes: usize },
    TooFewPatches { have: usize },
    StepOutOfRange { step: u64, total: u64 },
    MissingFile(PathBuf),
    BadGrade { line: usize, value: String },
    EmptyClass { grade: u8 },
    ClassMismatch { model: usize, manifest: usize },
    BadConfig(String),
    Io(String),
    Parse { path: PathBuf, line: usize, message: String },
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::TooFewPoints { have, need } => {
                write!(f, "too few points: have {have}, need {need}")
            }
            Error::InvalidCount {
                requested,
                available,
            } => write!(f, "invalid count: requested {requested} of {available}"),
            Error::EmptySet => write!(f, "point set is empty"),
            Error::EmptyBank => write!(f, "point memory bank is empty"),
            Error::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Error::DimensionMismatch { expected, actual } => {
                write!(f, "dimension mismatch: expected {expected}, got {actual}")
            }
            Error::BadDimension { dim } => {
                write!(f, "dimension {dim} is not divisible by 6")
            }
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::DoubleBackward => {
                write!(f, "backward called twice without resetting gradients")
            }
            Error::BadRatio(r) => write!(f, "ratio {r} outside [0, 1)"),
            Error::BadLabel { label, num_classes } => {
                write!(f, "label {label} outside 1..={num_classes}")
            }
            Error::TooFewPatches { have } => {
                write!(f, "need at least 2 patches, have {have}")
            }
            Error::StepOutOfRange { step, total } => {
                write!(f, "step {step} outside 0..={total}")
            }
            Error::MissingFile(path) => write!(f, "missing file: {}", path.display()),
            Error::BadGrade { line, value } => {
                write!(f, "bad grade {value:?} at manifest line {line}")
            }
            Error::EmptyClass { grade } => write!(f, "no samples for grade {grade}"),
            Error::ClassMismatch { model, manifest } => {
                write!(
                    f,
                    "class count mismatch: model has {model}, manifest has {manifest}"
                )
            }
            Error::BadConfig(msg) => write!(f, "bad config: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::Parse {
                path,
                line,
                message,
            } => write!(f, "parse error in {} line {line}: {message}", path.display()),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
