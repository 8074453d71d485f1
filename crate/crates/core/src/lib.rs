//! Lossless container and learned entropy coding for anchor-based scene
//! representations. Anchor attributes are coded with a Gaussian model whose
//! parameters come from a small hyper-decoder reading two axis-aligned
//! feature planes in the scene's principal frame. The planes themselves are
//! coded with a spatial autoregressive Laplace model.
//!
//! `codec::compress` and `codec::decompress` are the entry points; the
//! container layout is documented in FORMAT.md at the repository root.

pub mod attributes;
pub mod cli;
pub mod codec;
pub mod container;
pub mod entropy;
pub mod error;
pub mod frame;
pub mod hyperprior;
pub mod mlp;
pub mod pca;
pub mod planecodec;
pub mod rangecoder;
pub mod scene;
pub mod sweep;
pub mod trainer;

pub use error::{CodecError, Result};
