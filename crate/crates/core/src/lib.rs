//! Full-reference image quality assessment that fuses classical per-pixel
//! quality maps (PSNR, SSIM, MS-SSIM) with squared feature differences taken
//! from a frozen CNN backbone.
//!
//! The pipeline is:
//!
//! 1. [`traditional`] turns an (eval, ref) pair into inverted quality maps
//!    where 0 means "identical".
//! 2. [`backbone`] runs both images through a frozen CNN and taps a feature
//!    pyramid; [`deep`] squares the per-layer differences and splits them
//!    into perceptual and semantic groups.
//! 3. [`fusion`] applies a per-map 1x1 convolution, ReLU and spatial mean,
//!    then mixes the three group means with simplex weights. Lower scores
//!    mean better quality.
//!
//! [`trainer`] fits the fusion head on two-alternative forced choice data
//! and [`evalstats`] reports rank correlations against human judgments.

pub mod backbone;
pub mod datasets;
pub mod deep;
pub mod error;
pub mod evalstats;
pub mod fusion;
pub mod pipeline;
pub mod tensor;
pub mod traditional;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
