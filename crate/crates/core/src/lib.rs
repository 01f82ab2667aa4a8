//! Progressive visual token compression at desk scale.
//!
//! Images and videos are standardized as frame sequences, encoded by a ViT
//! whose last layers add causal temporal attention conditioned on relative
//! timestamps, and compressed per frame by a PixelShuffle + AdaLN + MLP head.
//! The crate also ships hand-derived backward passes with a finite-difference
//! checker, and an analytic token/FLOPs budget model.

pub mod budget;
pub mod compression;
pub mod conditioning;
pub mod error;
pub mod input;
pub mod manifest;
pub mod model;
pub mod tensor;
pub mod verification;
pub mod vit;

pub use error::{PvcError, Result};
pub use tensor::{Rng, Tensor};
