//! Discrete facial-expression tokenizer.
//!
//! Learns a compact dictionary of facial-expression tokens from 3DMM
//! expression vectors with a residual vector-quantized autoencoder, and
//! provides the surrounding evaluation stack: tokenization, additive
//! template decomposition, deformation heatmaps, diversity metrics,
//! exact-match retrieval and Bag-of-Words downstream features.

pub mod error;
pub mod runtime;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod optim;
pub mod rvq;
pub mod model;
pub mod synth;
pub mod checkpoint;
pub mod train;
pub mod codec;
pub mod analysis;
pub mod io;

pub use error::{Error, Result};
pub use tensor::Tensor;
