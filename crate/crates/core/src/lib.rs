//! Two-stage fish detection and species classification: tensors with
//! reverse-mode differentiation, declarative networks, an anchor-grid
//! detector, a squeeze-and-excitation classifier, augmentation, metrics,
//! dataset I/O, and the detect-then-classify pipeline.

pub mod augment;
pub mod autograd;
pub mod classify;
pub mod data;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
mod par;
pub mod pipeline;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
