use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// What the rigid/affine stages compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMetric {
    /// SSD between 0/1 prostate indicator images.
    Indicator,
    /// SSD between the masked intensity images.
    MaskedIntensity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub rigid: bool,
    pub affine: bool,
    pub deformable: bool,
}

/// Hyperparameters for one registration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationProfile {
    pub name: String,
    pub shrink_factors: Vec<usize>,
    /// Gaussian sigma per level, in pixels of the working image.
    pub sigmas: Vec<f64>,
    pub gd_learning_rate: f64,
    pub gd_iterations: usize,
    pub gd_tol: f64,
    pub lbfgsb_iterations: usize,
    pub lbfgsb_memory: usize,
    pub lbfgsb_tol: f64,
    pub mi_bins: usize,
    /// FFD cells per axis over the fixed image extent.
    pub ffd_cells: usize,
    /// Coefficient box: ± this many control spacings.
    pub ffd_bound: f64,
    pub affine_scale_bounds: (f64, f64),
    /// Dilation of the MI region, in pyramid-level pixels.
    pub mi_region_dilation: usize,
    /// Drop the finest pyramid level and skip stack reconstruction.
    pub fast_mode: bool,
    pub reconstruct: bool,
    pub stages: Stages,
    pub mask_metric: MaskMetric,
    /// Pixel size (mm) both modalities are resampled to for registration.
    pub working_spacing_mm: f64,
}

impl RegistrationProfile {
    pub const NAMES: [&'static str; 4] = ["standard", "thorough", "fast", "relaxed-affine"];

    pub fn standard() -> Self {
        RegistrationProfile {
            name: "standard".into(),
            shrink_factors: vec![16, 8, 4],
            sigmas: vec![4.0, 2.0, 1.0],
            gd_learning_rate: 0.01,
            gd_iterations: 250,
            gd_tol: 1e-7,
            lbfgsb_iterations: 10,
            lbfgsb_memory: 10,
            lbfgsb_tol: 1e-6,
            mi_bins: 64,
            ffd_cells: 8,
            ffd_bound: 2.0,
            affine_scale_bounds: (0.7, 1.4),
            mi_region_dilation: 2,
            fast_mode: false,
            reconstruct: true,
            stages: Stages {
                rigid: true,
                affine: true,
                deformable: true,
            },
            mask_metric: MaskMetric::Indicator,
            working_spacing_mm: 0.2,
        }
    }

    pub fn thorough() -> Self {
        RegistrationProfile {
            name: "thorough".into(),
            gd_iterations: 500,
            lbfgsb_iterations: 50,
            ..Self::standard()
        }
    }

    pub fn fast() -> Self {
        RegistrationProfile {
            name: "fast".into(),
            fast_mode: true,
            reconstruct: false,
            ..Self::standard()
        }
    }

    pub fn relaxed_affine() -> Self {
        RegistrationProfile {
            name: "relaxed-affine".into(),
            affine_scale_bounds: (0.4, 2.5),
            ..Self::standard()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "thorough" => Ok(Self::thorough()),
            "fast" => Ok(Self::fast()),
            "relaxed-affine" | "relaxed_affine" => Ok(Self::relaxed_affine()),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile '{other}' (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.shrink_factors.is_empty() || self.shrink_factors.len() != self.sigmas.len() {
            return bad(format!(
                "{} shrink factors but {} sigmas",
                self.shrink_factors.len(),
                self.sigmas.len()
            ));
        }
        if self.shrink_factors.contains(&0) || self.shrink_factors.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("shrink factors must be >= 1 and strictly decreasing: {:?}", self.shrink_factors));
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("sigmas must be finite and non-negative".into());
        }
        if !(self.gd_learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        let (lo, hi) = self.affine_scale_bounds;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return bad(format!("affine scale bounds ({lo}, {hi}) must bracket 1"));
        }
        if self.mi_bins < 4 || self.ffd_cells == 0 || !(self.ffd_bound > 0.0) {
            return bad("mi_bins >= 4, ffd_cells >= 1 and ffd_bound > 0 required".into());
        }
        if !(self.working_spacing_mm > 0.0) {
            return bad("working spacing must be positive".into());
        }
        Ok(())
    }

    /// Overlay a JSON object of field overrides, e.g. `{"fast_mode": true}`.
    /// A `"base"` key picks the preset the overrides apply to.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let obj = overrides
            .as_object()
            .ok_or_else(|| Error::InvalidArgument("profile overrides must be a JSON object".into()))?;
        let base = match obj.get("base") {
            Some(serde_json::Value::String(name)) => Self::by_name(name)?,
            Some(_) => return Err(Error::InvalidArgument("profile 'base' must be a preset name".into())),
            None => self.clone(),
        };
        let mut merged = serde_json::to_value(&base).expect("profile serialises");
        let target = merged.as_object_mut().expect("profile is an object");
        for (k, v) in obj {
            if k == "base" {
                continue;
            }
            if !target.contains_key(k) {
                return Err(Error::InvalidArgument(format!("unknown profile field '{k}'")));
            }
            target.insert(k.clone(), v.clone());
        }
        let profile: RegistrationProfile = serde_json::from_value(merged)
            .map_err(|e| Error::InvalidArgument(format!("profile overrides: {e}")))?;
        profile.validate()?;
        Ok(profile)
    }

    /// Pyramid levels actually used: the finest is dropped in fast mode.
    pub fn levels(&self) -> Vec<(usize, f64)> {
        let n = self.shrink_factors.len();
        let keep = if self.fast_mode && n > 1 { n - 1 } else { n };
        self.shrink_factors
            .iter()
            .copied()
            .zip(self.sigmas.iter().copied())
            .take(keep)
            .collect()
    }
}

impl Default for RegistrationProfile {
    fn default() -> Self {
        Self::standard()
    }
}
