use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("log of non-positive value {value} at flat index {index}; clamp first")]
    LogDomain { index: usize, value: f64 },
    #[error("{op} produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
    #[error("unknown variable {0}")]
    UnknownVar(usize),
    #[error("{primitive} expects {expected} inputs, got {got}")]
    Arity {
        primitive: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("spatial size {height}x{width} is not divisible by the output stride {stride}")]
    IndivisibleSize {
        height: usize,
        width: usize,
        stride: usize,
    },
    #[error("saliency mask must be binary, found {value} at position {index}")]
    NonBinaryMask { index: usize, value: f64 },
    #[error("dense CRF over {positions} positions exceeds the cap of {cap}; downsample the input")]
    CrfTooLarge { positions: usize, cap: usize },
    #[error("sample {0} has no ground-truth segmentation")]
    MissingGroundTruth(usize),
    #[error("label {label} out of range for {classes} classes at pixel {index}")]
    LabelRange {
        label: u8,
        classes: usize,
        index: usize,
    },
    #[error("could not place {shapes} shapes in sample {sample} after {attempts} attempts")]
    Placement {
        sample: usize,
        shapes: usize,
        attempts: usize,
    },
    #[error("pixel ({row}, {col}) is outside the {height}x{width} grid")]
    OutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}
