use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A caller-side precondition was violated.
    Contract(String),
    /// A non-finite value showed up where a finite one was required.
    Numeric(String),
    /// Invalid configuration (bad dims, missing variant weights, rank too large, ...).
    Config(String),
    /// A task id did not resolve to a registered head.
    Routing(u32),
    /// An input sequence or split was empty.
    EmptyInput(&'static str),
    /// The optimizer saw a non-finite gradient.
    NonFiniteGradient { step: u64, param: String },
}

impl Error {
    pub(crate) fn dims(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Routing(task) => write!(f, "task {task} has no registered adapter head"),
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::NonFiniteGradient { step, param } => {
                write!(f, "non-finite gradient for `{param}` at step {step}")
            }
        }
    }
}

impl core::error::Error for Error {}
