use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the kernels, the anchor tools and the annotation loader.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operands of an operation have incompatible shapes.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// The target layer is the deepest one, so there is nothing to borrow from.
    NoDeeperLayers {
        layer: usize,
        depth: usize,
    },
    /// Adjacent layer resolutions differ by more than the fixed deconvolution can bridge.
    UnsupportedGeometry {
        detail: String,
    },
    /// An argument is outside the domain of a formula.
    Domain {
        op: &'static str,
        detail: String,
    },
    /// A value violates a documented constraint.
    Validation {
        field: String,
        constraint: String,
    },
    /// Input could not be parsed as the expected format.
    Format {
        detail: String,
    },
    Io {
        path: String,
        message: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            constraint: constraint.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::NoDeeperLayers { layer, depth } => write!(
                f,
                "no deeper layers: layer {layer} is the deepest of a {depth}-layer pyramid"
            ),
            Error::UnsupportedGeometry { detail } => write!(f, "unsupported geometry: {detail}"),
            Error::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
            Error::Validation { field, constraint } => {
                write!(f, "invalid `{field}`: {constraint}")
            }
            Error::Format { detail } => write!(f, "format error: {detail}"),
            Error::Io { path, message } => write!(f, "cannot read {path}: {message}"),
        }
    }
}

impl std::error::Error for Error {}
