use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("arch spec line {line}: {msg}")]
    ArchParse { line: usize, msg: String },

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("tensor `{name}` has dims {found:?}, expected {expected:?}")]
    TensorDims {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported image file {0}")]
    UnsupportedFormat(PathBuf),

    #[error("corrupt image header in {path}: {msg}")]
    CorruptHeader { path: PathBuf, msg: String },

    #[error("class directory {0} contains no images")]
    EmptyClass(PathBuf),

    #[error("no feasible candidate: budget admits none of {0} evaluated architectures")]
    InfeasibleBudget(usize),

    #[error("loss became {value} at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        value: f32,
    },

    #[error("model has {model} classes but dataset has {data}")]
    ClassCount { model: usize, data: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
