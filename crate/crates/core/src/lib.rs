//! Multimodal emotion analysis: per-modality recurrent encoders, a
//! parameter-free shared/specific decoupling of their outputs, and
//! text-dominated hierarchical high-order fusion, on top of a small
//! reverse-mode autodiff engine.

pub mod data;
pub mod decouple;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod thhf;

pub use error::{Error, Result};
