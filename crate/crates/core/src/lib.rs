//! Sparse-view, pose-free 3D language fields on Gaussian splatting.
//!
//! The crate covers the numeric core of the pipeline: a differentiable
//! software rasterizer, cross-view semantic mask alignment, a bijective
//! feature codec, two-stage training, open-vocabulary querying, and the
//! interchange formats plus a synthetic scene generator that stand in for
//! external segmentation, embedding, matching and stereo models.

pub mod alignment;
pub mod featcodec;
pub mod io;
pub mod pipeline;
pub mod query;
pub mod rasterizer;
pub mod scene;
pub mod ssim;
pub mod trainer;

pub use scene::{Camera, Gaussian3D, GaussianCloud, Granularity, PipelineConfig};
