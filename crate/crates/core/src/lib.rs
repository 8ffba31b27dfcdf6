//! Semi-supervised 3D medical image segmentation built around rectified
//! pseudo supervision and bidirectional voxel-level contrastive learning.
//!
//! The crate is organised bottom-up:
//! - [`tensor`]: a small reverse-mode autodiff engine over `ndarray`
//! - [`volume`], [`nifti`], [`phantom`], [`dataset`]: volumetric data handling
//! - [`augment`]: weak intensity views and grid distortion
//! - [`network`]: a 3D U-Net with a voxel projection head
//! - [`losses`], [`sampling`], [`schedule`]: the training objective
//! - [`trainer`], [`infer`], [`metrics`]: optimisation, sliding-window
//!   inference and evaluation
//! - [`config`]: run configuration shared with the command line tool

pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nifti;
pub mod phantom;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
