//! Convolutional-LSTM engine for depth-video action recognition.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`ops`]: dense tensors and differentiable primitives.
//! * [`recurrent`]: the ConvLSTM cell, sequence runner and state lifecycle.
//! * [`models`]: the two-branch stateless and single-branch stateful networks.
//! * [`data`]: video container, preprocessing, window selection, length binning
//!   and a synthetic depth-video generator.
//! * [`train`]: Adam, learning-rate schedules, training loops and metrics.

pub mod data;
pub mod error;
pub mod gradcheck;
mod linalg;
pub mod models;
pub mod ops;
pub mod recurrent;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Real};
pub use tensor::Tensor;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/convlstm.md")]
    mod convlstm {}
    #[doc = include_str!("../../../book/src/architectures.md")]
    mod architectures {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
