use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: output extent is not exact ({extent} + 2*{pad} - {kernel} not divisible by stride {stride})")]
    InexactExtent {
        op: &'static str,
        extent: usize,
        pad: usize,
        kernel: usize,
        stride: usize,
    },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("slice ({c_in}, {c_out}) exceeds full width ({full_in}, {full_out})")]
    SliceOutOfRange {
        c_in: usize,
        c_out: usize,
        full_in: usize,
        full_out: usize,
    },
    #[error("invalid supernet spec: {0}")]
    InvalidSpec(String),
    #[error("invalid width config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}: {what}")]
    NonFiniteLoss { iteration: usize, what: String },
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),
    #[error("channel count {channels} outside latency table range for layer {layer}")]
    OutsideTable { layer: usize, channels: usize },
    #[error("invalid cost table: {0}")]
    InvalidTable(String),
    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("idx: {0}")]
    Idx(String),
}

pub type Result<T> = core::result::Result<T, Error>;
