use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("inconsistent shapes: {0}")]
    Shape(String),

    #[error("singular matrix: pivot {pivot:e} at column {column} is below threshold {threshold:e}")]
    SingularMatrix { column: usize, pivot: f64, threshold: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("class {class} out of range (model has {num_classes} classes)")]
    BadClass { class: usize, num_classes: usize },

    #[error("layer {layer} out of range (model has {num_layers} layers)")]
    BadLayer { layer: usize, num_layers: usize },

    #[error("pooled feature norm {0:e} is too small to normalize")]
    DegenerateNorm(f64),

    #[error("rank deficient system: even the regularized solve is non-finite")]
    RankDeficient,

    #[error("no stack of layers starting at layer {layer} reaches {needed} output neurons")]
    Unreachable { layer: usize, needed: usize },

    #[error("stored index {index} does not address a tensor of {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("value {0} lies outside [0, 1]")]
    OutOfRange(f64),

    #[error(
        "query and support vectors are orthogonal (dot product {dot:e}); \
         channel contribution weights are undefined when the cosine similarity is zero"
    )]
    OrthogonalPair { dot: f64 },

    #[error("feature vector has zero norm")]
    ZeroVector,

    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn at_layer(self, layer: usize) -> Self {
        Error::AtLayer {
            layer,
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The innermost error, skipping layer annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtLayer { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2: malformed input, 3: numerical failure, 4: orthogonal query/support pair.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::OrthogonalPair { .. } => 4,
            Error::SingularMatrix { .. }
            | Error::NonFinite(_)
            | Error::DegenerateNorm(_)
            | Error::RankDeficient
            | Error::Unreachable { .. }
            | Error::ZeroVector
            | Error::OutOfRange(_) => 3,
            _ => 2,
        }
    }
}
