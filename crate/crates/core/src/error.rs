//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the library, from shape mismatches in
/// tensor ops to malformed data files and diverging training runs.
#[derive(Error, Debug)]
pub enum Error {
    /// Two tensors disagree about dimensions; reports both shapes.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's contract (bad axis, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration value or unparsable config file.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed dataset, labels, or checkpoint content.
    #[error("data error: {0}")]
    Data(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of numerical origin (divergence, tolerance breach),
    /// as opposed to usage or data-format problems.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
