//! Dense tensors, a recording tape with reverse-mode gradients, and the
//! parameter store with its optimizer and checkpoint format.

pub mod check;
mod graph;
mod params;
mod tensor;

pub use graph::{EmptyRow, Gradients, Graph, Var};
pub use params::{
    AdamConfig, Checkpoint, CheckpointEntry, Init, ParamGrads, ParamId, ParameterStore,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use tensor::Tensor2;

use thiserror::Error;

fn fmt_shape(s: (usize, usize)) -> String {
    format!("{}x{}", s.0, s.1)
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {} and {}", fmt_shape(*.left), fmt_shape(*.right))]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{len} values cannot fill a {rows}x{cols} tensor")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("masked softmax row {row} has no unmasked entry")]
    EmptyMaskedRow { row: usize },
    #[error("row {row} selects masked column {col}")]
    MaskedSelection { row: usize, col: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFinite { name: String },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("duplicate parameter {0}")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl KernelError {
    pub fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        KernelError::Shape { op, left, right }
    }
}
