//! Instance-dependent permutation layers for training classifiers under label noise.
//!
//! Every training sample `i` owns a logit vector `alpha[i]`. Its softmax weights a
//! convex combination of the single-swap permutations `P(noisy_label, j)`, and the
//! resulting doubly stochastic matrix is applied either to the model's prediction
//! ([`trainer::Variant::PermutePrediction`]) or to the one-hot noisy label
//! ([`trainer::Variant::PermuteLabel`]). The layer only exists during training;
//! evaluation uses the bare classifier.
//!
//! Module map:
//!
//! - [`numerics`]: softmax, its Jacobian, finite-difference oracle, seeded RNG.
//! - [`permlayer`]: the permutation layer, its closed-form application and gradient.
//! - [`losses`]: losses on the probability simplex with first-argument gradients.
//! - [`model`]: linear and one-hidden-layer softmax classifiers with manual backprop.
//! - [`data`] / [`noise`]: datasets, readers, and synthetic label noise.
//! - [`trainer`]: joint SGD over model parameters and the alpha table, sweeps, checkpoints.
//! - [`propcheck`]: executable checks of the collapse / non-collapse / gradient-bound results.
//! - [`cli`]: the `permll` command-line driver.

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod permlayer;
pub mod propcheck;
pub mod trainer;

pub use error::{Error, Result};
