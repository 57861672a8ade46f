//! Morph-patch transformer kernels for 2D vessel segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` arrays, bilinear sampling, convolution, softmax, layer norm.
//! - [`diffeo`]: stationary velocity fields integrated by scaling and squaring.
//! - [`morphpatch`]: deformed patch features, window partitioning, cyclic shifts.
//! - [`sca`]: soft K-means cluster cores and semantic clustering attention.
//! - [`attention`]: window attention and the spatial + semantic block.
//! - [`model`]: velocity predictor, the small UNet-style network, Dice loss.
//! - [`grad`]: hand-written backward passes, finite-difference checks, Adam, checkpoints.
//! - [`metrics`]: Dice, IoU, skeletonization and clDice.
//! - [`phantom`]: synthetic tubular phantoms.
//! - [`config`] and [`train`]: the training driver used by the CLI.

pub mod attention;
pub mod config;
pub mod diffeo;
pub mod error;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod model;
pub mod morphpatch;
pub mod phantom;
pub mod sca;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{SampleCoords, Tensor};
