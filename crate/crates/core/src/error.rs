use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: input outside the function domain ({msg})")]
    Domain { op: &'static str, msg: String },

    #[error("backward requires a single-element root, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("gradient already populated on a leaf of shape {0:?}; reset gradients before calling backward again")]
    GradNotReset(Vec<usize>),

    #[error("layer {index} ({kind}): expected input shape {expected}, got {actual:?}")]
    LayerShape {
        index: usize,
        kind: &'static str,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite loss component `{component}` ({value})")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("interrater agreement undefined: mean accuracy is {0}")]
    DegenerateAccuracy(f64),

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
