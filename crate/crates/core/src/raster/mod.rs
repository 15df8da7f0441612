//! Differentiable tile-based Gaussian rasterizer.

pub mod project;
pub mod render;
pub mod sh;

pub use project::{
    build_covariance, build_covariance_backward, project, project_backward, CullReason, ProjectedGaussian,
    ProjectedGrad,
};
pub use render::{
    read_raw, render, render_backward, render_reference, RasterConfig, RenderGrad, RenderOutput, RenderStats, Support,
    RAW_MAGIC,
};
pub use sh::{evaluate_sh, evaluate_sh_raw};
