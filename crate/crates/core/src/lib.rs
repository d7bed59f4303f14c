//! Style-conditioned co-speech gesture generation.
//!
//! The pipeline tokenizes hand and body motion with a dual-stream VQ-VAE,
//! distils a style code from a reference pose clip with a transformer
//! encoder and self-attention pooling, fuses MFCC audio features with that
//! style code by cross-attention, and predicts both codebook index streams
//! with a cross-conditional autoregressive transformer. Variation, Fréchet
//! gesture distance and beat consistency metrics evaluate the output.

pub mod error;
pub mod numerics;
pub mod pose;
pub mod audio;
pub mod checkpoint;
pub mod eval;
pub mod quantizer;
pub mod style;
pub mod predictor;
pub mod harness;

pub use error::{Error, Result};
