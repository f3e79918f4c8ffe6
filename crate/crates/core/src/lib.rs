//! Character-level password models and the machinery to measure them:
//! corpus handling, a causal transformer decoder and its training loop, an
//! n-gram baseline, Monte Carlo guess-number estimation, and quantized
//! strength-meter bundles.

pub mod corpus;
pub mod error;
pub mod markov;
pub mod mc_estimator;
pub mod model;
pub mod psm;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
