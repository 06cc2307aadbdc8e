use std::io;

use dxp_autodiff::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt {what} at byte offset {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u8,
        expected: u8,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("sampling diverged at step {step} (t = {t:.6})")]
    SamplingDiverged { step: usize, t: f64 },
    #[error("training loss became non-finite at step {0}")]
    NonFiniteLoss(usize),
    #[error("degenerate mask geometry after {0} attempts")]
    DegenerateGeometry(usize),
    #[error("synthesized mask rejected {0} times (foreground fraction out of range)")]
    MaskRejected(usize),
    #[error("missing condition: {0}")]
    MissingCondition(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("image export: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
