//! Deterministic dense-matrix primitives and seeded randomness.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::RandomStream;
