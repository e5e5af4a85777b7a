//! Binary face-impression classification with a small from-scratch CNN.
//!
//! Pipeline: rater scores are averaged per image and dichotomized into
//! percentile tails ([`ratings`]), split into train/val ([`manifest`]),
//! learned by a fixed three-stage CNN ([`network`], [`training`]) on
//! randomly augmented images ([`augment`]), and explained with Grad-CAM
//! overlays ([`explain`]).

pub mod augment;
pub mod cli;
pub mod error;
pub mod explain;
pub mod imageio;
pub mod manifest;
pub mod model_io;
pub mod network;
pub mod ops;
pub mod optim;
pub mod ratings;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, ModelFormatError, Result};
pub use network::{build_paper_cnn, Model};
pub use tensor::{Scalar, Tensor};
