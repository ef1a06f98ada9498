//! Reconstruction-trained visual token pruning.
//!
//! A frozen patch encoder turns images into visual tokens; a one-layer
//! pruner with a learnable query scores every token; training reconstructs
//! foreground pixels from high-scoring tokens and background pixels from the
//! rest through one shared decoder. At inference the scores drive a Top-K
//! selection that keeps token positions intact.
//!
//! All model code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the training precision.

pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flops;
pub mod layers;
pub mod losses;
pub mod masking;
pub mod prune_infer;
pub mod pruner;
pub mod recon_decoder;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type TokenSequence32 = encoder::TokenSequence<f32>;
pub type PrunerParams32 = pruner::PrunerParams<f32>;
pub type DecoderParams32 = recon_decoder::DecoderParams<f32>;
pub type Trainer32 = training::Trainer<f32>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
