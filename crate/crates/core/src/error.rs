use thiserror::Error;

use crate::io::FormatError;
use crate::quant::QuantSpec;
use crate::tensor::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor dims {0}: every dimension must be at least 1")]
    InvalidDims(Dims),
    #[error("data length {actual} does not match dims ({expected} elements)")]
    DataLength { expected: usize, actual: usize },
    #[error("value {value} outside the representable range of {spec}")]
    OutOfRange { value: i64, spec: QuantSpec },
    #[error("tensor contains non-finite values")]
    NonFinite,
    #[error("scale exponent {0} outside [-24, 8]")]
    ScaleExpOutOfRange(i32),
    #[error("unsupported bit width {0} (expected 8 or 16)")]
    UnsupportedBitWidth(u32),
    #[error("requantization shift {0} is negative")]
    NegativeShift(i32),
    #[error("accumulator value {value} overflows the {bits}-bit datapath")]
    AccumulatorOverflow { value: i64, bits: u32 },

    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("node `{node}` references unknown input `{input}`")]
    UnknownInput { node: String, input: String },
    #[error("graph contains a cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("shape mismatch at `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("invalid layer `{node}`: {detail}")]
    InvalidLayer { node: String, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing weight tensor `{tensor}` for node `{node}`")]
    MissingWeight { node: String, tensor: String },
    #[error("weight tensor `{tensor}` has dims {actual:?}, expected {expected:?}")]
    WeightShape { tensor: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("weight tensor `{0}` has the wrong element type")]
    WeightType(String),
    #[error("no value supplied for graph input `{0}`")]
    MissingInput(String),
    #[error("node `{node}` cannot run on the accelerator datapath: {detail}")]
    Unsupported { node: String, detail: String },
    #[error("invalid operand: {0}")]
    InvalidOperand(String),

    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
