//! Propagate pixel-level cell annotations from a small archetype bank.
//!
//! The library implements the full flow:
//!
//! 1. [`warp`] generates, composes, inverts, and applies realistic
//!    diffeomorphisms as dense displacement fields.
//! 2. [`patch`] and [`bank`] model annotated archetype patches and build
//!    augmented banks by warping each archetype through sampled fields.
//! 3. [`invariant`] trains the encoder whose latent space collapses
//!    diffeomorphic variants together, and matches new cells against the
//!    bank in that space.
//! 4. [`mapping`] predicts the dense warp between a matched archetype and
//!    a new cell, so labels transfer through the inverse field.
//! 5. [`synth`] generates shape scenes with exact ground truth, and hosts
//!    the evaluation metrics.
//! 6. [`pipeline`] chains the pieces into counting, orientation, and
//!    few-shot segmentation.
//! 7. [`theory`] measures covering radii of the sampled deformation set
//!    and checks the matching-error bound empirically.
//!
//! All numeric types are generic over the scalar via [`num::Scalar`]
//! (`f32` or `f64`); the `*32` aliases at the crate root fix the
//! production precision.

pub mod bank;
pub mod error;
pub mod invariant;
pub mod mapping;
pub mod nn;
pub mod num;
pub mod patch;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor_io;
pub mod theory;
pub mod warp;

pub use error::{Error, Result};
pub use num::Scalar;

/// Production-precision aliases.
pub type WarpField32 = warp::WarpField<f32>;
pub type CellPatch32 = patch::CellPatch<f32>;
pub type LabelStack32 = patch::LabelStack<f32>;
pub type WholeImage32 = patch::WholeImage<f32>;
pub type CellBank32 = bank::CellBank<f32>;
pub type EncoderModel32 = invariant::EncoderModel<f32>;
pub type MapperModel32 = mapping::MapperModel<f32>;
