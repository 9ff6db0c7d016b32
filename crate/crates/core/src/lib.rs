//! Self-calibrated cross attention for few-shot segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`gradcheck`], [`sctf`]: dense kernels,
//!   reverse-mode differentiation, finite-difference checking and the tensor
//!   file format. [`checks`] runs gradient checks over the whole network.
//! - [`windowing`]: K×K window partition with shifted, zero-padded lattices.
//! - [`pma`]: training-free pseudo masks.
//! - [`fusion`], [`attention`], [`model`]: the learned network.
//! - [`episodes`], [`train`], [`cost`], [`config`]: synthetic data, the
//!   training/evaluation loop, the analytic cost model and run configuration.

pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod cost;
pub mod episodes;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod pma;
pub mod sctf;
pub mod tensor;
pub mod train;
pub mod windowing;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
