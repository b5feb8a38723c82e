//! Minimal dense-array engine with reverse-mode differentiation.

pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod param;
pub mod real;

pub use array::Tensor;
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, grad_check_filtered, relative_error, GradCheckReport};
pub use graph::{Conv2dSpec, Graph, PadMode, Var, PROB_EPS};
pub use gru::GruCell;
pub use param::{Adadelta, Gradients, ParamId, ParamStore, Parameter};
pub use real::{DType, Real};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
