//! Bit-token image tokenization and masked-bit generation.
//!
//! Stage I is a purely convolutional autoencoder with either a learned-codebook vector
//! quantizer or a lookup-free sign quantizer that emits `K`-bit tokens. Stage II is a
//! bidirectional transformer that consumes bit tokens directly (no token embedding table),
//! masks them in groups of consecutive bits and decodes images non-autoregressively.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at the crate
//! root pick the single-precision instantiation used for training.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod quantizers;
pub mod sampler;
pub mod scalar;
pub mod tokenizer;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Autoencoder = tokenizer::Autoencoder<f32>;
pub type Autoencoder64 = tokenizer::Autoencoder<f64>;
pub type MaskBit = generator::MaskBit<f32>;
pub type MaskBit64 = generator::MaskBit<f64>;
pub type Discriminator = losses::Discriminator<f32>;
pub type Discriminator64 = losses::Discriminator<f64>;
pub type Stage1Trainer = trainer::Stage1Trainer<f32>;
pub type Stage1Trainer64 = trainer::Stage1Trainer<f64>;
pub type Stage2Trainer = trainer::Stage2Trainer<f32>;
pub type Stage2Trainer64 = trainer::Stage2Trainer<f64>;
