//! Segmentation of enhancing lesions directly from complex k-space.
//!
//! The crate simulates DCE-MRI exams, prepares k-space network inputs,
//! implements four volumetric U-Net variants (hybrid k-space-to-image,
//! native k-space, magnitude and complex image-space) with a small
//! reverse-mode autodiff engine, and provides the training loop, sliding
//! window evaluation under undersampling and noise, paired statistics and
//! frequency-domain feature analysis.

pub mod error;
pub mod evaluation;
pub mod features;
pub mod io;
pub mod kspace;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod sampling;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
