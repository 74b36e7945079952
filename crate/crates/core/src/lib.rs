//! Caption-grounded joint visual embeddings for zero-shot learning.
//!
//! Two embedding heads map visual and sentence features into a shared unit-norm
//! space under a structure-preserving alignment loss. The resulting visual
//! embeddings feed a bilinear compatibility classifier evaluated under the
//! standard and generalized zero-shot protocols.

mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod zsl;

pub use error::{Error, ErrorKind, Result};
pub use head::{EmbeddingHead, ForwardTrace, HeadConfig, HeadGradients, Mode};
pub use loss::{LossConfig, MiniBatch, Triplet, TripletSet};
pub use tensor::{Matrix, Rng};

/// Class identifier used for labels, groups and attribute rows.
pub type ClassId = u32;
