//! Hierarchical 3D transformer for volumetric segmentation, built on a
//! self-contained reverse-mode differentiation engine.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: differentiable n-d arrays and the op kernels;
//! - [`encoder`], [`decoder`], [`model`]: the network itself;
//! - [`volume`], [`nifti`]: voxel grids and their on-disk formats;
//! - [`train`], [`infer`], [`metrics`]: optimization, sliding-window
//!   prediction, and evaluation;
//! - [`checkpoint`], [`config`]: persistence;
//! - [`selftest`]: the built-in verification suites.
//!
//! The `examples/` directory demonstrates each capability end to end.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
