//! Speech enhancement training with supervised, mixture-invariant
//! unsupervised and semi-supervised objectives, at a scale that runs on a
//! laptop CPU.
//!
//! The crate is organised bottom-up: [`dsp`] turns audio into complex
//! spectrograms, [`autodiff`] differentiates everything downstream,
//! [`model`] is the mask-estimating U-net with a GRU bottleneck,
//! [`embedder`] and [`losses`] define the training objectives, [`datagen`]
//! synthesises corpora, [`metrics`] scores enhanced audio and [`trainer`]
//! ties them together.

pub mod autodiff;
pub mod datagen;
pub mod dsp;
pub mod embedder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
