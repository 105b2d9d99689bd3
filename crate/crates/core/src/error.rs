use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes, indices or parameters violate an operation's contract.
    #[error("{op}: contract violation: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Input is well-formed but degenerate for the operation (zero-norm row,
    /// zero Gram matrix, all-zero spectrum, ...).
    #[error("{op}: degenerate input: {detail}")]
    Degenerate { op: &'static str, detail: String },

    /// An iterative routine failed to converge or produced non-finite values.
    #[error("{op}: numeric failure: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A non-IID partition could not satisfy its shard constraints.
    #[error("partition failed after {attempts} attempts: {detail}")]
    Partition { attempts: usize, detail: String },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate { op, detail: detail.into() }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric { op, detail: detail.into() }
    }

    /// True for the degenerate-input family, including when wrapped by a
    /// client or round context.
    pub fn is_degenerate(&self) -> bool {
        match self {
            Error::Degenerate { .. } => true,
            Error::Client { source, .. } | Error::Round { source, .. } => source.is_degenerate(),
            _ => false,
        }
    }

    /// True for non-finite losses or parameters, looking through client and
    /// round wrappers.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric { .. } => true,
            Error::Client { source, .. } | Error::Round { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    /// Round index of a [`Error::Round`] failure.
    pub fn round(&self) -> Option<usize> {
        match self {
            Error::Round { round, .. } => Some(*round),
            _ => None,
        }
    }
}
