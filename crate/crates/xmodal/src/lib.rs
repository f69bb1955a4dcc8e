//! Cross-modal knowledge distillation and consistency-guided active
//! learning on synthetic paired-modality data, with explicit reverse-mode
//! gradients throughout and bitwise-reproducible experiments.

pub mod al;
pub mod alignment;
pub mod config;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod evidential;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod numcore;

pub use error::{Result, XmodalError};
