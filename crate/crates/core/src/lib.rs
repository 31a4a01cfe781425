//! Long-short term temporal convolution (LSTC) and enhanced joint-mixing
//! augmentation for skeleton-based action recognition, at desk scale.
//!
//! Module map:
//! - [`tensor`], [`tape`]: dense `f64` tensors and the reverse-mode tape.
//! - [`lstc`]: the two-branch temporal downsampling layer.
//! - [`augment`]: feature alignment and the temporal/spatial/additive mixes.
//! - [`data`]: NTU `.skeleton` parsing, modalities, synthetic datasets.
//! - [`model`]: toy classifier, optimizer, schedule, training and ensembles.

pub mod augment;
pub mod data;
pub mod gradcheck;
pub mod io;
pub mod lstc;
pub mod model;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
