//! Attribute prototype network for zero- and few-shot classification with
//! weakly supervised attribute localization.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode autodiff tape and a
//!   finite-difference gradient checker.
//! * [`data`]: attribute schemas, the synthetic attribute-grounded image
//!   generator, the on-disk dataset bundle and episode sampling.
//! * [`model`]: encoder, global branch, attribute prototypes, zoom-in crop and
//!   the joint loss.
//! * [`train`]: Adam training loop, configuration files, checkpoints and
//!   hyper-parameter grid search.
//! * [`eval`]: zero-/few-shot prediction, calibrated stacking, metrics,
//!   attribute localization, PCP and heatmap export.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
pub use geometry::PixelBox;
pub use tensor::{Float, Graph, Tensor, Var};
