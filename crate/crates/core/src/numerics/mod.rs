//! Dense 4-D arrays and a tape-based reverse-mode differentiation engine.
//!
//! Everything is generic over [`Real`] so the same operator code runs in
//! 32-bit for training and in 64-bit when checking gradients against finite
//! differences.

mod conv;
mod fft;
mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use fft::{irfft2, rfft2, ComplexSpectrum};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Offender};
pub use real::Real;
pub use tape::{BatchStats, Gradients, OpKind, Tape, Var};
pub use tensor::{Parameter, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Per-pixel channel softmax on an N×C×H×W tensor, max-shifted.
pub fn softmax_channels<S: Real>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = logits.dims4("softmax_channels")?;
    if c < 2 {
        return Err(NumericsError::InvalidShape {
            op: "softmax_channels",
            shape: logits.shape().to_vec(),
            reason: "need at least 2 channels".into(),
        });
    }
    let mut out = vec![S::zero(); logits.len()];
    tape::softmax_forward(logits.data(), &mut out, n, c, h * w);
    Tensor::new(logits.shape().to_vec(), out)
}
