//! Differentiable monotonic text-to-spectrum alignment.
//!
//! The crate learns where each text token ends inside a frame sequence by
//! reconstructing the frames from token hidden states through a monotonic
//! boundary attention, then reads integer token durations off the trained
//! model.
//!
//! Module map:
//! - [`autodiff`]: reverse-mode tape, parameters, Adam, checkpoints
//! - [`encoders`]: text and mel encoders
//! - [`align`]: boundary/alignment posteriors, Gumbel discretization, interlacing
//! - [`inference`]: hard boundary scan and duration extraction
//! - [`oracle`]: brute-force enumeration of boundary paths
//! - [`corpus`]: synthetic corpora and JSON-lines persistence
//! - [`trainer`]: reconstruction model, schedules, training loop
//! - [`config`], [`export`]: key=value configs and matrix dumps

pub mod align;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod export;
pub mod inference;
pub mod oracle;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
