//! Robust unsupervised machine translation at desk scale.
//!
//! A from-scratch stack: reverse-mode autodiff engine, a small shared
//! transformer encoder-decoder, synthetic word / word-order noise, adversarial
//! embedding perturbations, a denoising + back-translation training loop, and
//! a BLEU-based robustness evaluation harness over synthetic cipher-language
//! pairs.

pub mod adversarial;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod noise;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
