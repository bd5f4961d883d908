//! Sparse-view CT reconstruction engine.
//!
//! The crate provides discrete projectors with exact adjoints, analytic
//! reconstruction (FBP/FDK), data-consistency optimization, diffusion
//! posterior alignment samplers with pluggable score models, Monte-Carlo
//! posterior statistics and the PSNR/SSIM evaluation protocol.

pub mod analytic;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod optimize;
pub mod posterior;
pub mod projector;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{AngleSet, ConeBeamGeometry, Geometry, ParallelGeometry2D, VolumeGrid};
pub use diffusion::{NoiseSchedule, SamplerConfig, ScoreModel};
pub use metrics::MetricConfig;
pub use optimize::DcProblem;
pub use projector::{Projections, Projector, ViewOperator};
pub use volume::Volume;
