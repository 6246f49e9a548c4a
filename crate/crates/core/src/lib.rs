//! Hybrid CNN/Transformer hyperspectral image classifier.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: a small dense tensor type and a tape-based
//!   reverse-mode differentiator with exactly the kernels the network needs.
//! - [`model`]: spectral-spatial convolutional stem, Transformer and CNN
//!   branches, the three classification heads, and ablation variants.
//! - [`data`]: hyperspectral cube I/O, normalization, patch extraction,
//!   stratified sampling and synthetic scenes.
//! - [`train`]: Adam and the training loop.
//! - [`eval`]: confusion matrices, OA/AA/kappa, and classification maps.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
