//! One-stage referring expression comprehension: data pipeline, encoders,
//! fusion, detection head, training loop and evaluation.

pub mod augment;
pub mod cli;
pub mod config;
pub mod container;
pub mod datahub;
pub mod dethead;
pub mod fusion;
pub mod geometry;
pub mod graph;
pub mod image_ops;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod textenc;
pub mod trainer;
pub mod visenc;

pub use scalar::Real;

/// Scalar used for training and inference.
pub type Scalar = f32;
pub type Params = graph::ParamStore<Scalar>;
pub type Trainer = trainer::Trainer<Scalar>;
pub type Restored = trainer::Restored<Scalar>;
