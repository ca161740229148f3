//! Layer-wise multi-view decoding for Transformer sequence-to-sequence models.
//!
//! Each decoder layer cross-attends to a view of the source produced by a
//! routing strategy over all encoder layer outputs, optionally combined with
//! the last encoder layer through a layer-normalized sum ("soft
//! integration"). The crate contains everything needed to train and study
//! such models at desk scale:
//!
//! - [`autodiff`]: dense tensors with reverse-mode differentiation
//! - [`model`]: the encoder-decoder, routing strategies and integration modes
//! - [`train`]: Adam, two-phase training, checkpoints and averaging
//! - [`tasks`]: deterministic synthetic sequence-to-sequence datasets
//! - [`eval`]: beam search, BLEU, accuracy and length-bucketed reports
//! - [`diagnostics`]: consumption probes, gradient-path norms, cosine maps,
//!   attention export and SVG heatmaps

pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

/// Reserved token ids shared by every module.
pub mod tokens {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    /// First id available for content tokens.
    pub const FIRST_CONTENT: usize = 3;
}
