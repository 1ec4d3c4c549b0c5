//! Radiology-pathology registration engine.
//!
//! Serial whole-mount histology slices are reconstructed into a consistent
//! stack, registered slice by slice onto the corresponding MRI slices
//! (rigid, affine, then B-spline free-form deformation), and their labels and
//! landmarks are mapped onto the MRI grid. A procedural digital phantom with
//! known ground truth drives validation.
//!
//! Module map:
//!
//! - [`image`]: geometry-aware images, resampling, pyramids, file I/O
//! - [`transform`]: rigid, affine, flip, B-spline FFD and composite transforms
//! - [`metrics`]: SSD and histogram mutual information, finite-difference gradients
//! - [`optim`]: fixed learning-rate gradient descent and bounded L-BFGS
//! - [`registration`]: single slice-pair registration
//! - [`pipeline`]: case-level orchestration (preprocess, reconstruct, register, map)
//! - [`evaluation`]: Dice, Hausdorff, landmark/urethra deviation, Mann-Whitney U
//! - [`phantom`]: digital phantom synthesis, degradations and condition sweeps

pub mod error;
pub mod evaluation;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod transform;

pub use error::{Error, Result};

/// 2D physical point or vector in millimetres, `[x, y]`.
pub type Point2 = [f64; 2];

/// Software version recorded in reproducibility records.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
