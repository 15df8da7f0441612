//! Uncertainty-guided Gaussian splatting.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the
//! `*F32` / `*F64` aliases below name the common instantiations.

// `!(x < y)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Small fixed-size linear algebra reads better with explicit indices.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod error;
pub mod hashgrid;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod softdrop;
pub mod synthetic;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Real;

pub type GaussianSetF32 = scene::GaussianSet<f32>;
pub type GaussianSetF64 = scene::GaussianSet<f64>;
pub type CameraF64 = scene::Camera<f64>;
pub type SceneF64 = scene::Scene<f64>;
pub type UncertaintyNetF64 = uncertainty::UncertaintyNet<f64>;
pub type UncertaintyNetF32 = uncertainty::UncertaintyNet<f32>;
pub type TrainerF64 = trainer::Trainer<f64>;
