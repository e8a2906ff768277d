//! Multi-view learning with missing views.
//!
//! Per-view encoders feed a fusion module whose output width does not depend
//! on which views are present. Training can augment with view subsets, and
//! the evaluation harness measures how predictions degrade as views go
//! missing.

pub mod augmentation;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod views;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use views::{MaskSet, ViewKind, ViewSet, ViewSpec};
