//! Desk-scale vision-language fusion testbed.
//!
//! The crate implements a complete toy pipeline on top of an f64
//! reverse-mode tape: text-guided joint vision encoding, latent-token
//! windowed-attention decoding, and bidirectional reconstruction losses,
//! plus the rule-based data-quality scoring used to filter synthetic
//! caption/QA data. Everything is deterministic and small enough to verify
//! against finite-difference and brute-force oracles.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod filter;
pub mod image;
pub mod loss;
pub mod model;
pub mod scorer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{DecoderConfig, EncoderConfig, Model, ModelConfig};
pub use tensor::{Mask, Tensor};
