//! Causal transformer decoder over the character vocabulary.
//!
//! Pre-norm blocks (layer norm, multi-head self-attention with an additive
//! causal mask, residual; layer norm, GELU feed-forward, residual), a final
//! layer norm, and an output head tied to the token embedding.

pub mod checkpoint;
mod config;
mod decoder;
pub(crate) mod ops;
mod scalar;
mod weights;

pub use config::{parameter_count, ModelConfig};
pub use decoder::{CausalMask, Generator};
pub use scalar::Scalar;
pub use weights::{DecoderWeights, ParamLayout, TensorKind, TensorSpec};
