//! Desk-scale laboratory for class-aware logit distillation.
//!
//! The crate stacks up from a minimal reverse-mode tape over dense f64
//! tensors, the distillation loss family and its baselines, small MLP /
//! convnet classifiers, deterministic data generation and batching, and an
//! SGD trainer that wires the pieces into teacher pretraining and
//! teacher-student distillation runs.

pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
