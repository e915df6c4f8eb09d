//! Numerics for COM-field guided feature upsampling.
//!
//! The crate is `no_std` (with `alloc`) and contains every pure piece of the
//! pipeline: a small tensor type with a reverse-mode tape, the relational
//! field extractor (local self-affinity, entropy, spikiness, center-of-mass
//! field), spikiness-aware consensus fusion, the neighborhood-attention
//! upsampler, the training objective, a procedural scene generator with
//! synthetic frozen feature extractors, and linear-probe evaluation.
//!
//! File formats, the CLI and the verification harness live in the `comfield`
//! crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod lab;
pub mod math;
pub mod numerics;
pub mod relational;
pub mod synthworld;
pub mod training;
pub mod upsampler;

pub use error::{Error, Result};
pub use numerics::{FeatureMap, Rng, Tape, Tensor, Var};
