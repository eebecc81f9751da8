//! Cross-domain GAN toolkit.
//!
//! Trains single-domain, combined, coupled (weight-tied) and
//! domain-adaptation GANs on image corpora, and searches the resulting
//! discriminator and classifier feature spaces for nearest frames and
//! similar episodes.

pub mod binfmt;
pub mod corpus;
pub mod embedspace;
pub mod error;
pub mod kv;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod render;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
