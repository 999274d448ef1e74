//! Adversarial augmentation-policy search for place-recognition retrieval.
//!
//! A recurrent controller proposes augmentation policies for query images and
//! is rewarded by the retrieval loss they cause; the retrieval network (a small
//! convolutional backbone with region-decomposed VLAD pooling) is trained to
//! minimize that same loss, with similarity labels distilled from the frozen
//! previous generation.

pub mod augment;
pub mod controller;
pub mod descriptor;
pub mod diff;
pub mod error;
pub mod exec;
pub mod harness;
pub mod supervision;
pub mod real;
pub mod rngs;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
