//! Desk-scale cascaded conditional flow matching for volumetric synthesis.
//!
//! The pipeline learns to synthesize internal 3D density volumes of
//! procedurally generated phantom torsos from a partial external-surface
//! signed distance function plus demographic scalars, then evaluates the
//! result with anatomical agreement statistics.
//!
//! Module map:
//! - [`tensor`]: dense N-d arrays with reverse-mode autodiff (tape based).
//! - [`nn`]: the 3D U-Net velocity model, AdamW, EMA tracking, checkpoints.
//! - [`geometry`]: voxel volumes, SDF computation, surface metrics, VOL3 I/O.
//! - [`phantom`]: procedural subject generation (demographics, density, masks).
//! - [`flow`]: the interpolation path, velocity regression loss, training loop.
//! - [`sampler`]: sigma schedule, time grid, Euler/Heun/Dormand-Prince solvers.
//! - [`cascade`]: conditioning assembly, patch tiling and blending, the three
//!   stage runners and the end-to-end pipeline.
//! - [`metrics`]: band segmentation, Diff%, OLS, Bland-Altman, paired t-tests.
//! - [`experiment`]: the miniature train/sample/evaluate experiment.

pub mod cascade;
pub mod experiment;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use geometry::{OccupancyMask, SdfGrid, Volume3};
pub use experiment::{ExperimentConfig, ExperimentOutcome};
pub use metrics::{MetricsReport, PairedSeries, StatsSummary, SubjectPair};
pub use phantom::{Demographics, PhantomRecord};
pub use sampler::SamplerConfig;
pub use cascade::PipelineConfig;
pub use nn::{EmaState, OptimizerState, UNet, UNetConfig};
pub use tensor::{Tape, Tensor};
