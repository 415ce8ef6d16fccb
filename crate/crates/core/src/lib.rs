//! Differentiable 2D Gaussian-splat image fitting.
//!
//! The pieces: a tiled alpha-blending rasterizer with an analytic backward
//! pass and a dilated (sub-sampled) mode, Adam with batched accumulation,
//! gradient-driven densification under a power-law Gaussian budget, KD-tree
//! seeded initialization, and a phased training loop with checkpoints.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`).

pub mod bench;
pub mod budget;
pub mod checkpoint;
pub mod densify;
pub mod dilation;
pub mod error;
pub mod image;
pub mod init;
pub mod kdtree;
pub mod loss;
pub mod model;
pub mod optim;
pub mod raster;
pub mod scalar;
pub mod splat;
pub mod train;

pub use error::{Result, SplatError};
pub use scalar::Scalar;

pub type Gaussian2Df32 = splat::Gaussian2D<f32>;
pub type Gaussian2Df64 = splat::Gaussian2D<f64>;
pub type GaussianModelF32 = model::GaussianModel<f32>;
pub type GaussianModelF64 = model::GaussianModel<f64>;
pub type RasterizerF32 = raster::Rasterizer<f32>;
pub type RasterizerF64 = raster::Rasterizer<f64>;
pub type TrainerF32 = train::Trainer<f32>;
pub type TrainerF64 = train::Trainer<f64>;
pub type ImageF32 = image::Image<f32>;
pub type ImageF64 = image::Image<f64>;
