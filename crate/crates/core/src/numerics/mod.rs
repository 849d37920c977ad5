//! Dense matrix arithmetic, a matrix-level reverse-mode tape, the
//! orthonormal DCT-II pair and the Adam optimizer.

mod adam;
mod dct;
mod matrix;
mod ops;
mod tape;

pub use adam::{Adam, AdamState};
pub(crate) use adam::clip_global_norm;
pub use dct::{dct_rows, idct_rows, Dct};
pub use matrix::Matrix;
pub use ops::{argmax_rows, cosine, cosine_rows, softmax_rows};
pub use tape::{Gradients, SeqLayout, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    Dimension { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("backward requires a scalar (1x1) loss, got {}x{}", shape.0, shape.1)]
    NonScalarLoss { shape: (usize, usize) },
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
}

impl NumericsError {
    pub(crate) fn dims(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        NumericsError::Dimension { op, left, right }
    }
}
