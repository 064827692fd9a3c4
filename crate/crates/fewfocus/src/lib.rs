//! Few-focus image fusion toolkit.
//!
//! Trains and runs a conditional-GAN fusion system for microscopy-style
//! images: a blur-region segmenter, a U-Net-with-DenseBlocks generator and
//! a PatchGAN discriminator, all running on a small self-contained
//! reverse-mode autodiff engine. Also ships the matching evaluation
//! metrics (SSIM / CC / QMI), a synthetic local-blur degradation pipeline
//! and an overlap-tiled whole-slide fusion path.

pub mod config;
pub mod dataset;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wsi;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor};
