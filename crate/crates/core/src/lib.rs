//! Pedestrian collision avoidance from two small CNNs.
//!
//! An outward-facing stream is scanned for pedestrians with a sliding-window
//! classifier, a driver-facing stream is classified for eye state, and the
//! two softmax scores are multiplied. An alarm is raised when the product
//! exceeds a threshold.
//!
//! Everything is built from scratch on a small `f64` tensor type with
//! explicit per-layer backward passes.

pub mod data;
pub mod detector;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod weights_file;

pub use error::{Error, Result};
pub use model::{build_eye_net, build_pedestrian_net, init_weights, ModelSpec, ModelWeights};
pub use tensor::Tensor;
