//! Fast video anomaly detection by future-frame prediction.
//!
//! A small 3D-convolutional U-Net autoencoder predicts the frame that follows
//! a window of `n` frames. During training, random patch cuboids of the input
//! window are rotated (per frame) or temporally shuffled so that the model
//! learns to predict the *normal* continuation; at test time the raw window
//! is used and the PSNR of the prediction, normalized per clip, is the
//! normality score.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
