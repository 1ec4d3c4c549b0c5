//! Single slice-pair registration: rigid and affine on prostate masks, then
//! a B-spline FFD on intensities.
//!
//! The MRI slice is the fixed image and defines the output grid; histology
//! is the moving image. Every returned transform maps fixed physical points
//! into moving physical points.

mod deformable;
mod linear;
mod profile;

use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

pub use deformable::register_deformable;
pub use linear::{register_affine_images, register_affine_masks, register_rigid_images, register_rigid_masks};
pub use profile::{MaskMetric, RegistrationProfile, Stages};

use crate::evaluation::dice;
use crate::image::{center_of_mass, resample_label, Grid2D, LabelMask2D, ScalarImage2D};
use crate::optim::OptimizerReport;
use crate::transform::{AffineTransform2D, BSplineFFD2D, RigidTransform2D, Transform2D};
use crate::{Error, Result};

/// Per-stage optimisation summary. `initial_value`/`final_value` are the
/// stage metric on its finest pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub initial_value: f64,
    pub final_value: f64,
    pub level_iterations: Vec<usize>,
    /// Concatenated per-level optimiser traces.
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

impl StageReport {
    pub(crate) fn new(stage: &str) -> Self {
        StageReport {
            stage: stage.to_string(),
            initial_value: f64::NAN,
            final_value: f64::NAN,
            level_iterations: Vec::new(),
            trace: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub(crate) fn push_level(&mut self, r: &OptimizerReport) {
        self.level_iterations.push(r.iterations_used);
        self.trace.extend_from_slice(&r.trace);
    }
}

/// Levels whose shrunk images keep at least 4 pixels per side on both grids.
pub(crate) fn usable_levels(a: &Grid2D, b: &Grid2D, levels: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let min_side = a.width().min(a.height()).min(b.width()).min(b.height());
    levels.iter().copied().filter(|&(f, _)| min_side / f >= 4).collect()
}

/// A prepared slice: gray image (outside-mask pixels zero) and prostate mask
/// on the same working grid.
#[derive(Clone, Debug)]
pub struct SliceImages {
    pub gray: ScalarImage2D,
    pub mask: LabelMask2D,
}

impl SliceImages {
    pub fn new(gray: ScalarImage2D, mask: LabelMask2D) -> Result<Self> {
        gray.grid().ensure_same(mask.grid(), "slice mask")?;
        Ok(SliceImages { gray, mask })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePairResult {
    pub rigid: RigidTransform2D,
    pub affine: Option<AffineTransform2D>,
    pub ffd: Option<BSplineFFD2D>,
    pub stages: Vec<StageReport>,
    /// Prostate Dice on the fixed grid before registration and after each
    /// linear stage.
    pub dice_input: f64,
    pub dice_rigid: f64,
    pub dice_affine: Option<f64>,
    /// Dice of the moving mask mapped through [`SlicePairResult::transform`].
    pub final_dice: f64,
    /// A stage failed; the chain stops at the last successful one.
    pub degraded: bool,
    pub warnings: Vec<String>,
    /// Kept out of the per-slice JSON so it stays byte-stable across runs;
    /// the run log records it.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl SlicePairResult {
    /// The linear part: affine when estimated, otherwise rigid.
    pub fn linear(&self) -> Transform2D {
        match &self.affine {
            Some(a) => (*a).into(),
            None => self.rigid.into(),
        }
    }

    /// Full fixed→moving chain: FFD first, then the linear part.
    pub fn transform(&self) -> Transform2D {
        let mut stages = Vec::new();
        if let Some(f) = &self.ffd {
            stages.push(f.clone().into());
        }
        stages.push(self.linear());
        Transform2D::chain(stages).expect("non-empty chain")
    }
}

fn mask_dice(fixed: &LabelMask2D, moving: &LabelMask2D, t: &Transform2D) -> Result<f64> {
    let mapped = resample_label(&moving.foreground(), fixed.grid(), t)?;
    dice(&fixed.foreground(), &mapped, 1)
}

/// Centroid-aligned rigid start about the fixed mask's centre of mass.
pub fn centroid_init(fixed_mask: &LabelMask2D, moving_mask: &LabelMask2D) -> Result<RigidTransform2D> {
    let cf = center_of_mass(&fixed_mask.foreground(), 1)?;
    let cm = center_of_mass(&moving_mask.foreground(), 1)?;
    Ok(RigidTransform2D::new(0.0, [cm[0] - cf[0], cm[1] - cf[1]], cf))
}

/// Rigid → affine → deformable, each stage optional per profile.
pub fn register_slice_pair(
    fixed: &SliceImages,
    moving: &SliceImages,
    profile: &RegistrationProfile,
) -> Result<SlicePairResult> {
    let started = Instant::now();
    profile.validate()?;
    let init = centroid_init(&fixed.mask, &moving.mask)?;
    let grays = match profile.mask_metric {
        MaskMetric::Indicator => None,
        MaskMetric::MaskedIntensity => Some((&fixed.gray, &moving.gray)),
    };
    let mut stages = Vec::new();
    let mut warnings = Vec::new();
    let mut degraded = false;

    let dice_input = mask_dice(&fixed.mask, &moving.mask, &Transform2D::identity())?;

    let rigid = if profile.stages.rigid {
        let (r, rep) = register_rigid_images(&fixed.mask, &moving.mask, grays, &init, profile)?;
        warnings.extend(rep.warnings.iter().cloned());
        stages.push(rep);
        r
    } else {
        init
    };
    let dice_rigid = mask_dice(&fixed.mask, &moving.mask, &rigid.into())?;

    let mut affine = None;
    if profile.stages.affine {
        match register_affine_images(&fixed.mask, &moving.mask, grays, &AffineTransform2D::from(rigid), profile) {
            Ok((a, rep)) => {
                warnings.extend(rep.warnings.iter().cloned());
                stages.push(rep);
                affine = Some(a);
            }
            Err(e) => {
                warn!("affine stage failed: {e}");
                warnings.push(format!("affine stage failed: {e}"));
                degraded = true;
            }
        }
    }
    let dice_affine = match &affine {
        Some(a) => Some(mask_dice(&fixed.mask, &moving.mask, &(*a).into())?),
        None => None,
    };

    let linear: Transform2D = match &affine {
        Some(a) => (*a).into(),
        None => rigid.into(),
    };
    let mut ffd = None;
    if profile.stages.deformable && !degraded {
        let warped = resample_label(&moving.mask.foreground(), fixed.mask.grid(), &linear)?;
        let region = fixed.mask.union(&warped)?;
        match register_deformable(&fixed.gray, &moving.gray, &linear, &region, profile) {
            Ok((f, rep)) => {
                warnings.extend(rep.warnings.iter().cloned());
                stages.push(rep);
                ffd = Some(f);
            }
            Err(e) => {
                warn!("deformable stage failed: {e}");
                warnings.push(format!("deformable stage failed: {e}"));
                degraded = true;
            }
        }
    }

    let mut result = SlicePairResult {
        rigid,
        affine,
        ffd,
        stages,
        dice_input,
        dice_rigid,
        dice_affine,
        final_dice: 0.0,
        degraded,
        warnings,
        wall_time_s: 0.0,
    };
    result.final_dice = mask_dice(&fixed.mask, &moving.mask, &result.transform())?;
    result.wall_time_s = started.elapsed().as_secs_f64();
    Ok(result)
}

/// Rejects slice images whose masks are empty, naming which side.
pub fn check_pair(fixed: &SliceImages, moving: &SliceImages) -> Result<()> {
    if fixed.mask.foreground_count() == 0 {
        return Err(Error::EmptyRegion("fixed prostate mask".into()));
    }
    if moving.mask.foreground_count() == 0 {
        return Err(Error::EmptyRegion("moving prostate mask".into()));
    }
    Ok(())
}
