//! Snapshot compressive spectral imaging with one-step residual refinement.
//!
//! The crate simulates a single-disperser coded-aperture spectral imager,
//! reconstructs cubes with a frozen classical predictor (normalized adjoint or
//! GAP-TV) and trains a small convolutional residual generator on top of it.
//! Training is self-supervised: only the 2-D snapshots are used, through a
//! measurement-consistency term and an equivariance term over a finite group
//! of spatial transforms.
//!
//! Module map:
//!
//! - [`datamodel`]: cubes, masks, measurements, synthetic scenes, container files.
//! - [`optics`]: the measurement operator, its adjoint and noise injection.
//! - [`transforms`]: the shift/flip/rotation group used by the equivariance loss.
//! - [`solvers`]: frozen initial predictors and the on-disk prediction cache.
//! - [`refiner`]: the residual generator with hand-written reverse-mode gradients.
//! - [`training`]: losses, Adam, the training step and inference.
//! - [`metrics`]: PSNR, SSIM and spectral curves.
//! - [`experiment`]: configuration, guarded data directories and the pipeline
//!   commands used by the command-line front end.

pub mod datamodel;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod metrics;
pub mod optics;
pub mod real;
pub mod refiner;
pub mod rng;
pub mod solvers;
pub mod training;
pub mod transforms;

pub use datamodel::{CodedMask, Cube, MaskKind, Measurement, SceneSpec, SpectralCube};
pub use error::{Error, Result};
pub use optics::{ForwardOperator, SystemSpec};
pub use real::Real;
pub use refiner::{RefinerArch, RefinerModel};
pub use solvers::{InitialPredictor, PredictorKind};
pub use transforms::{GroupElement, GroupSpec};
