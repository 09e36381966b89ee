//! Minimal neural-network building blocks on top of `candle-core`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that they can be
//! enumerated deterministically for optimization, EMA tracking and checkpointing.

pub mod layers;
pub mod ops;
mod params;

pub use params::{Init, ParamStore, Scope};
