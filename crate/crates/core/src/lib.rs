//! Class-token pooling for sequence verification.
//!
//! A transformer encoder with memory layers turns a sequence of feature
//! frames into one embedding, either by averaging (`avg`), through a
//! class token drawn from a shrinking pool (`cls`), or through a student
//! that learns from a teacher via an extra distillation token (`cls-dist`).
//! The guide under `book/` walks through each part; its code blocks are
//! compiled and run as doc-tests of this crate.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod tokens;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
