//! Bilinear-pooling classifiers trained with a constrained triplet objective.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode [`tensor::Tape`].
//! - [`backbone`]: two small convolutional feature streams, the classifier
//!   head over the bilinear feature and the L2-normalised embedding head.
//! - [`bilinear`]: outer-product pooling, signed square root, normalisation.
//! - [`losses`]: triplet, constrained triplet, similarity-weighted softmax and
//!   their convex combination.
//! - [`mining`]: in-batch hard / semi-hard triplet selection and
//!   similarity-driven class oversampling.
//! - [`data`]: directory ingestion, augmentation, balancing, splits and a
//!   synthetic dataset generator.
//! - [`trainer`]: two-phase optimisation loop, checkpoints, alpha sweeps.
//! - [`eval`]: confusion matrices, ROC/AUC, pair verification and reports.
//! - [`gradcheck`]: central finite-difference checks for every op and loss.

pub mod backbone;
pub mod bilinear;
pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod mining;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorError};

/// Class index in `0..k`.
pub type ClassId = usize;
