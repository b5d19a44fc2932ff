//! Caption-conditioned autoregressive image generation.
//!
//! A self-contained engine that learns to generate small grayscale images
//! from text captions: a bidirectional LSTM encodes the caption into
//! per-word annotation vectors, an attention layer aligns each pixel step
//! with caption words, and an LSTM decoder factorizes the image into an
//! ordered product of per-pixel categorical distributions, trained by exact
//! maximum likelihood. Evaluation covers structural similarity (SSIM) and
//! log-likelihood retrieval (recall@K), and a synthetic captioned-digits
//! dataset generator makes the whole pipeline hermetic.
//!
//! Start with the runnable examples (`cargo run --example <name>`) or the
//! `pixgen` binary (`gen-data`, `train`, `sample`, `eval`, `grad-check`).

pub mod attention;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
