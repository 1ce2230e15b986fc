//! Point cloud completion from patch seeds: autodiff tape, geometric kernels,
//! encoder, seed generator, upsample layers, losses, training and data.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod gradsuite;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
pub use generator::{AttentionMode, GeneratorKind};
pub use geometry::{Point3, PointCloud};
pub use metrics::{ChamferNorm, LossBreakdown};
pub use pipeline::{ModelConfig, RunSettings, SeedFormer, TrainConfig, Trainer};
