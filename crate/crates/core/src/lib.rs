//! Vector-quantized attention.
//!
//! Keys are snapped to a learned codebook, which lets causal softmax
//! attention be evaluated block by block in linear time while remaining
//! exactly equal to the quadratic form over the quantized keys.
//!
//! * [`tensor`]: dense arrays, contractions, stable softmax, masking.
//! * [`quantizer`]: nearest-codeword lookup, commit loss, EMA codebooks.
//! * [`attention`]: layer parameters and the quadratic reference.
//! * [`linear`]: the block recurrence and its three cache reductions.
//! * [`autodiff`], [`model`], [`optim`], [`train`]: training.
//! * [`sampler`]: token-by-token decoding and nucleus sampling.
//! * [`corpus`]: byte corpora and window batching.
//! * [`bench`], [`verify`], [`config`]: command-line plumbing.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod linear;
pub mod model;
pub mod optim;
pub mod quantizer;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor, NEG_LARGE};
