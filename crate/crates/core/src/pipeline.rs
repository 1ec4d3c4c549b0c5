//! Case-level orchestration.
//!
//! 0. Preprocess: mask, gross rotation/flip and resampling to the working
//!    spacing.
//! 1. Reconstruct: chain rigid registrations outward from the middle
//!    histology slice so the stack is self-consistent.
//! 2. Register: each histology slice onto its MRI slice (rigid, affine,
//!    deformable).
//! 3. Map: push histology RGB, labels and landmarks through the full chain
//!    onto the native MRI grid.
//!
//! Every per-slice chain maps MRI physical points to *original* histology
//! physical points, so labels are resampled once from their native images.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluation::{CaseMasks, HausdorffAggregation, MetricReport};
use crate::image::{
    gaussian_blur, read_label_image, read_label_volume, read_landmarks, read_rgb_image, read_scalar_volume,
    resample_label, resample_rgb, resample_scalar, rgb_to_gray, write_label_image, write_label_volume,
    write_landmarks, write_rgb_image, write_rgb_volume, write_scalar_volume, Grid2D, Interpolation,
    LabelMask2D, LabelVolume3D, PointSet2D, RgbImage2D, RgbVolume3D, ScalarImage2D, ScalarVolume3D,
};
use crate::registration::{
    centroid_init, register_rigid_masks, register_slice_pair, MaskMetric, RegistrationProfile, SliceImages,
    SlicePairResult,
};
use crate::transform::{FlipLR, RigidTransform2D, Transform2D};
use crate::{Error, Point2, Result, VERSION};

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub case_id: String,
    pub mri: MriEntry,
    pub histology: HistologyEntry,
    /// Registration profile overrides (see [`RegistrationProfile::with_overrides`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MriEntry {
    pub t2: PathBuf,
    pub prostate_mask: PathBuf,
    /// Reference annotations used only for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub urethra_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancer_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<MriLandmarkEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MriLandmarkEntry {
    pub mri_slice_index: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistologyEntry {
    pub slices: Vec<HistologySliceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistologySliceEntry {
    pub image: PathBuf,
    pub prostate_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancer_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub urethra_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
    pub mri_slice_index: usize,
    pub rotation_deg: f64,
    pub flip_lr: bool,
    pub pixel_spacing_mm: f64,
    /// Physical position of pixel (0, 0); defaults to the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_mm: Option<[f64; 2]>,
}

fn manifest_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Manifest {
        field: field.into(),
        message: message.into(),
    }
}

impl CaseManifest {
    /// Parse and validate a manifest; relative paths are resolved against
    /// the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: CaseManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        if let Some(dir) = path.parent() {
            m.resolve_paths(dir);
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.case_id.trim().is_empty() {
            return Err(manifest_err("case_id", "must not be empty"));
        }
        let slices = &self.histology.slices;
        if slices.is_empty() {
            return Err(manifest_err("histology.slices", "at least one slice is required"));
        }
        for (i, s) in slices.iter().enumerate() {
            let field = |f: &str| format!("histology.slices[{i}].{f}");
            if !(s.pixel_spacing_mm.is_finite() && s.pixel_spacing_mm > 0.0) {
                return Err(manifest_err(field("pixel_spacing_mm"), format!("{} must be > 0", s.pixel_spacing_mm)));
            }
            if !s.rotation_deg.is_finite() {
                return Err(manifest_err(field("rotation_deg"), "must be finite"));
            }
            if i > 0 && s.mri_slice_index <= slices[i - 1].mri_slice_index {
                return Err(manifest_err(
                    field("mri_slice_index"),
                    format!(
                        "{} does not increase after {}",
                        s.mri_slice_index,
                        slices[i - 1].mri_slice_index
                    ),
                ));
            }
        }
        if let Some(p) = &self.profile {
            RegistrationProfile::standard()
                .with_overrides(p)
                .map_err(|e| manifest_err("profile", e.to_string()))?;
        }
        Ok(())
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.mri.t2);
        fix(&mut self.mri.prostate_mask);
        self.mri.urethra_mask.iter_mut().for_each(fix);
        self.mri.cancer_mask.iter_mut().for_each(fix);
        for l in self.mri.landmarks.iter_mut().flatten() {
            fix(&mut l.path);
        }
        for s in &mut self.histology.slices {
            fix(&mut s.image);
            fix(&mut s.prostate_mask);
            s.cancer_mask.iter_mut().for_each(fix);
            s.urethra_mask.iter_mut().for_each(fix);
            s.landmarks.iter_mut().for_each(fix);
        }
    }

    /// Profile for this case: `base` with the manifest's overrides applied.
    pub fn profile(&self, base: &RegistrationProfile) -> Result<RegistrationProfile> {
        match &self.profile {
            Some(o) => base.with_overrides(o),
            None => Ok(base.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// In-memory case

/// One histology section as loaded, in its own physical frame.
#[derive(Clone, Debug)]
pub struct HistologySlice {
    pub rgb: RgbImage2D,
    pub mask: LabelMask2D,
    pub cancer: Option<LabelMask2D>,
    pub urethra: Option<LabelMask2D>,
    pub landmarks: Option<PointSet2D>,
    pub mri_slice_index: usize,
    pub rotation_deg: f64,
    pub flip_lr: bool,
}

/// Everything a case needs, independent of where it came from.
#[derive(Clone, Debug)]
pub struct CaseInputs {
    pub case_id: String,
    pub t2: ScalarVolume3D,
    pub prostate: LabelVolume3D,
    pub urethra: Option<LabelVolume3D>,
    pub cancer: Option<LabelVolume3D>,
    /// Reference MRI landmarks per MRI slice index.
    pub mri_landmarks: BTreeMap<usize, PointSet2D>,
    pub slices: Vec<HistologySlice>,
}

impl CaseInputs {
    pub fn validate(&self) -> Result<()> {
        let m = self.t2.depth();
        self.t2.grid().ensure_same(self.prostate.grid(), "MRI prostate mask")?;
        if self.prostate.depth() != m {
            return Err(Error::GridMismatch(format!(
                "MRI has {m} slices, prostate mask {}",
                self.prostate.depth()
            )));
        }
        for (name, v) in [("urethra", &self.urethra), ("cancer", &self.cancer)] {
            if let Some(v) = v {
                self.t2.grid().ensure_same(v.grid(), &format!("MRI {name} mask"))?;
                if v.depth() != m {
                    return Err(Error::GridMismatch(format!("MRI {name} mask depth {} vs {m}", v.depth())));
                }
            }
        }
        if self.slices.is_empty() {
            return Err(Error::InvalidArgument("case has no histology slices".into()));
        }
        for (i, s) in self.slices.iter().enumerate() {
            if s.mri_slice_index >= m {
                return Err(Error::SliceIndexOutOfRange {
                    index: s.mri_slice_index,
                    count: m,
                });
            }
            if i > 0 && s.mri_slice_index <= self.slices[i - 1].mri_slice_index {
                return Err(Error::InvalidArgument(format!(
                    "histology slice {i}: MRI indices must strictly increase"
                )));
            }
            s.rgb.grid().ensure_same(s.mask.grid(), &format!("histology slice {i} mask"))?;
            for (name, l) in [("cancer", &s.cancer), ("urethra", &s.urethra)] {
                if let Some(l) = l {
                    s.rgb.grid().ensure_same(l.grid(), &format!("histology slice {i} {name} mask"))?;
                }
            }
            if s.mask.foreground_count() == 0 {
                return Err(Error::EmptyRegion(format!("histology slice {i} prostate mask")));
            }
            if self.prostate.slice(s.mri_slice_index)?.foreground_count() == 0 {
                return Err(Error::EmptyRegion(format!(
                    "MRI prostate mask on slice {}",
                    s.mri_slice_index
                )));
            }
        }
        Ok(())
    }
}

/// Read every file a manifest references.
pub fn load_case(manifest: &CaseManifest) -> Result<CaseInputs> {
    manifest.validate()?;
    let t2 = read_scalar_volume(&manifest.mri.t2)?;
    let prostate = read_label_volume(&manifest.mri.prostate_mask)?;
    let urethra = manifest.mri.urethra_mask.as_ref().map(read_label_volume).transpose()?;
    let cancer = manifest.mri.cancer_mask.as_ref().map(read_label_volume).transpose()?;
    let mut mri_landmarks = BTreeMap::new();
    for l in manifest.mri.landmarks.iter().flatten() {
        mri_landmarks.insert(l.mri_slice_index, read_landmarks(&l.path)?);
    }
    let mut slices = Vec::with_capacity(manifest.histology.slices.len());
    for s in &manifest.histology.slices {
        let sp = [s.pixel_spacing_mm; 2];
        let origin = s.origin_mm.unwrap_or([0.0, 0.0]);
        let rgb = read_rgb_image(&s.image, sp, origin)?;
        let label = |p: &Option<PathBuf>| p.as_ref().map(|p| read_label_image(p, sp, origin)).transpose();
        slices.push(HistologySlice {
            mask: read_label_image(&s.prostate_mask, sp, origin)?,
            cancer: label(&s.cancer_mask)?,
            urethra: label(&s.urethra_mask)?,
            landmarks: s.landmarks.as_ref().map(read_landmarks).transpose()?,
            rgb,
            mri_slice_index: s.mri_slice_index,
            rotation_deg: s.rotation_deg,
            flip_lr: s.flip_lr,
        });
    }
    let inputs = CaseInputs {
        case_id: manifest.case_id.clone(),
        t2,
        prostate,
        urethra,
        cancer,
        mri_landmarks,
        slices,
    };
    inputs.validate()?;
    Ok(inputs)
}

/// Write a case as NIfTI volumes, PNG slices, landmark JSON and a manifest
/// (`manifest.json`) with paths relative to `dir`.
pub fn save_case(inputs: &CaseInputs, dir: impl AsRef<Path>) -> Result<CaseManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_scalar_volume(dir.join("mri_t2.nii.gz"), &inputs.t2)?;
    write_label_volume(dir.join("mri_prostate.nii.gz"), &inputs.prostate)?;
    let mut mri = MriEntry {
        t2: "mri_t2.nii.gz".into(),
        prostate_mask: "mri_prostate.nii.gz".into(),
        urethra_mask: None,
        cancer_mask: None,
        landmarks: None,
    };
    if let Some(u) = &inputs.urethra {
        write_label_volume(dir.join("mri_urethra.nii.gz"), u)?;
        mri.urethra_mask = Some("mri_urethra.nii.gz".into());
    }
    if let Some(c) = &inputs.cancer {
        write_label_volume(dir.join("mri_cancer.nii.gz"), c)?;
        mri.cancer_mask = Some("mri_cancer.nii.gz".into());
    }
    if !inputs.mri_landmarks.is_empty() {
        let mut entries = Vec::new();
        for (&k, set) in &inputs.mri_landmarks {
            let name = format!("mri_landmarks_{k:03}.json");
            write_landmarks(dir.join(&name), set)?;
            entries.push(MriLandmarkEntry {
                mri_slice_index: k,
                path: name.into(),
            });
        }
        mri.landmarks = Some(entries);
    }
    let mut slices = Vec::new();
    for (i, s) in inputs.slices.iter().enumerate() {
        let sp = s.rgb.grid().spacing();
        if (sp[0] - sp[1]).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "histology slice {i}: anisotropic spacing {sp:?} cannot be stored as PNG"
            )));
        }
        let name = |what: &str, ext: &str| format!("hist_{i:03}_{what}.{ext}");
        write_rgb_image(dir.join(name("image", "png")), &s.rgb)?;
        write_label_image(dir.join(name("prostate", "png")), &s.mask)?;
        let mut entry = HistologySliceEntry {
            image: name("image", "png").into(),
            prostate_mask: name("prostate", "png").into(),
            cancer_mask: None,
            urethra_mask: None,
            landmarks: None,
            mri_slice_index: s.mri_slice_index,
            rotation_deg: s.rotation_deg,
            flip_lr: s.flip_lr,
            pixel_spacing_mm: sp[0],
            origin_mm: Some(s.rgb.grid().origin()),
        };
        if let Some(c) = &s.cancer {
            write_label_image(dir.join(name("cancer", "png")), c)?;
            entry.cancer_mask = Some(name("cancer", "png").into());
        }
        if let Some(u) = &s.urethra {
            write_label_image(dir.join(name("urethra", "png")), u)?;
            entry.urethra_mask = Some(name("urethra", "png").into());
        }
        if let Some(l) = &s.landmarks {
            write_landmarks(dir.join(name("landmarks", "json")), l)?;
            entry.landmarks = Some(name("landmarks", "json").into());
        }
        slices.push(entry);
    }
    let manifest = CaseManifest {
        case_id: inputs.case_id.clone(),
        mri,
        histology: HistologyEntry { slices },
        profile: None,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Step 0

#[derive(Clone, Debug)]
pub struct PreparedSlice {
    pub histology_index: usize,
    pub mri_slice_index: usize,
    /// Prepared histology point → original histology point (undoes the gross
    /// rotation/flip).
    pub gross: Transform2D,
    /// Masked gray histology and mask at working spacing.
    pub histology: SliceImages,
    pub rgb: RgbImage2D,
    pub cancer: Option<LabelMask2D>,
    pub urethra: Option<LabelMask2D>,
    /// Landmarks in prepared coordinates.
    pub landmarks: Option<PointSet2D>,
    /// Masked MRI slice cropped around the prostate, at working spacing.
    pub mri: SliceImages,
}

#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub case_id: String,
    pub working_spacing_mm: f64,
    pub slices: Vec<PreparedSlice>,
}

/// Gross correction: the prepared image shows the original flipped about the
/// mask centroid's vertical line, then rotated by `rotation_deg` about the
/// centroid. Returned as the prepared→original map.
pub fn gross_transform(center: Point2, rotation_deg: f64, flip_lr: bool) -> Transform2D {
    let rot: Transform2D = RigidTransform2D::about(-rotation_deg.to_radians(), center).into();
    if flip_lr {
        Transform2D::chain([rot, FlipLR::new(center[0]).into()]).expect("non-empty")
    } else {
        rot
    }
}

/// Grid at `spacing` holding `source` under any rotation about `center`.
/// Its origin lies on `source`'s pixel lattice (in steps of `spacing`), so
/// at equal spacing the two grids share pixel centres.
fn covering_grid(source: &Grid2D, center: Point2, spacing: f64) -> Result<Grid2D> {
    let lo = source.lower_edge();
    let ext = source.extent();
    let corners = [lo, [lo[0] + ext[0], lo[1]], [lo[0], lo[1] + ext[1]], [lo[0] + ext[0], lo[1] + ext[1]]];
    let r = corners
        .iter()
        .map(|c| (c[0] - center[0]).hypot(c[1] - center[1]))
        .fold(0.0, f64::max)
        + spacing;
    let so = source.origin();
    let snap = |v: f64, o: f64| o + ((v - o) / spacing).floor() * spacing;
    let origin = [snap(center[0] - r, so[0]), snap(center[1] - r, so[1])];
    let n = |axis: usize| ((center[axis] + r - origin[axis]) / spacing).ceil() as usize + 1;
    Grid2D::new(n(0), n(1), [spacing, spacing], origin)
}

/// Working grid around the foreground of `mask`, with a margin of a quarter
/// of the bounding box (at least 4 mm).
fn crop_grid(mask: &LabelMask2D, spacing: f64) -> Result<Grid2D> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) != 0 {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::EmptyRegion("MRI prostate mask".into()));
    }
    let g = mask.grid();
    let s = g.spacing();
    let lo = g.index_to_physical(x0 as f64 - 0.5, y0 as f64 - 0.5);
    let hi = g.index_to_physical(x1 as f64 + 0.5, y1 as f64 + 0.5);
    let margin = (0.25 * (hi[0] - lo[0]).max(hi[1] - lo[1])).max(4.0).max(s[0].max(s[1]));
    let w = ((hi[0] - lo[0] + 2.0 * margin) / spacing).ceil() as usize;
    let h = ((hi[1] - lo[1] + 2.0 * margin) / spacing).ceil() as usize;
    Grid2D::new(
        w,
        h,
        [spacing, spacing],
        [lo[0] - margin + 0.5 * spacing, lo[1] - margin + 0.5 * spacing],
    )
}

/// Gray image, anti-aliased when it is much finer than the working spacing.
fn working_gray(rgb: &RgbImage2D, mask: &LabelMask2D, spacing: f64) -> Result<ScalarImage2D> {
    let gray = rgb_to_gray(&rgb.masked(mask)?);
    let ratio = spacing / gray.grid().spacing()[0].min(gray.grid().spacing()[1]);
    Ok(if ratio > 1.5 { gaussian_blur(&gray, 0.4 * ratio) } else { gray })
}

pub fn prepare_slice(
    inputs: &CaseInputs,
    histology_index: usize,
    spacing: f64,
) -> Result<PreparedSlice> {
    let s = &inputs.slices[histology_index];
    // Snapped to the half-pixel lattice so a flip maps pixel centres onto
    // pixel centres.
    let com = crate::image::center_of_mass(&s.mask.foreground(), 1)?;
    let [ix, iy] = s.mask.grid().physical_to_index(com);
    let center = s.mask.grid().index_to_physical((2.0 * ix).round() / 2.0, (2.0 * iy).round() / 2.0);
    let gross = gross_transform(center, s.rotation_deg, s.flip_lr);
    let grid = covering_grid(s.mask.grid(), center, spacing)?;
    let mask = resample_label(&s.mask.foreground(), &grid, &gross)?;
    if mask.foreground_count() == 0 {
        return Err(Error::EmptyRegion(format!(
            "histology slice {histology_index} prostate mask vanished at {spacing} mm"
        )));
    }
    let gray = resample_scalar(&working_gray(&s.rgb, &s.mask, spacing)?, &grid, &gross, Interpolation::Linear, 0.0)?
        .masked(&mask)?;
    let rgb = resample_rgb(&s.rgb, &grid, &gross, Interpolation::Linear, [0.0; 3])?.masked(&mask)?;
    let label = |l: &Option<LabelMask2D>| l.as_ref().map(|l| resample_label(l, &grid, &gross)).transpose();
    let landmarks = match &s.landmarks {
        Some(set) => {
            let inv = gross.inverse()?;
            Some(set.map_points(|p| inv.apply(p)))
        }
        None => None,
    };

    let mri_mask_native = inputs.prostate.slice(s.mri_slice_index)?.foreground();
    let crop = crop_grid(&mri_mask_native, spacing)?;
    let id = Transform2D::identity();
    let mri_mask = resample_label(&mri_mask_native, &crop, &id)?;
    let mri_gray = resample_scalar(inputs.t2.slice(s.mri_slice_index)?, &crop, &id, Interpolation::Linear, 0.0)?
        .masked(&mri_mask)?;

    let (cancer, urethra) = (label(&s.cancer)?, label(&s.urethra)?);
    Ok(PreparedSlice {
        histology_index,
        mri_slice_index: s.mri_slice_index,
        gross,
        histology: SliceImages::new(gray, mask)?,
        rgb,
        cancer,
        urethra,
        landmarks,
        mri: SliceImages::new(mri_gray, mri_mask)?,
    })
}

pub fn preprocess(inputs: &CaseInputs, profile: &RegistrationProfile) -> Result<PreparedCase> {
    inputs.validate()?;
    let spacing = profile.working_spacing_mm;
    let slices = (0..inputs.slices.len())
        .map(|i| prepare_slice(inputs, i, spacing))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedCase {
        case_id: inputs.case_id.clone(),
        working_spacing_mm: spacing,
        slices,
    })
}

// ---------------------------------------------------------------------------
// Step 1

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// Per slice: stack frame (the middle slice's prepared frame) → prepared
    /// slice frame.
    pub transforms: Vec<RigidTransform2D>,
    pub middle: usize,
    pub warnings: Vec<String>,
}

impl Reconstruction {
    pub fn identity(count: usize) -> Self {
        Reconstruction {
            transforms: vec![RigidTransform2D::identity(); count],
            middle: count / 2,
            warnings: Vec::new(),
        }
    }
}

/// Register each slice to its already-placed neighbour, outward from
/// `floor(D/2)`, on binary masks.
pub fn reconstruct_stack(prepared: &PreparedCase, profile: &RegistrationProfile) -> Result<Reconstruction> {
    let d = prepared.slices.len();
    if d == 0 {
        return Err(Error::InvalidArgument("reconstruction needs at least one slice".into()));
    }
    let mut rec = Reconstruction::identity(d);
    let m = rec.middle;
    let stack_grid = *prepared.slices[m].histology.mask.grid();
    let order: Vec<(usize, usize)> = (0..m).rev().map(|k| (k, k + 1)).chain((m + 1..d).map(|k| (k, k - 1))).collect();
    for (k, n) in order {
        let neighbour = &prepared.slices[n].histology.mask;
        let moving = &prepared.slices[k].histology.mask;
        let link = || -> Result<RigidTransform2D> {
            let fixed = resample_label(neighbour, &stack_grid, &rec.transforms[n].into())?;
            let init = centroid_init(&fixed, moving)?;
            Ok(register_rigid_masks(&fixed, moving, &init, profile)?.0)
        };
        rec.transforms[k] = match link() {
            Ok(t) => t,
            Err(e) => {
                let msg = format!("reconstruction link {k}->{n} failed ({e}); using identity link");
                warn!("{msg}");
                rec.warnings.push(msg);
                rec.transforms[n]
            }
        };
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------
// Step 2

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceOutcome {
    pub histology_index: usize,
    pub mri_slice_index: usize,
    pub recon: RigidTransform2D,
    pub gross: Transform2D,
    pub result: Option<SlicePairResult>,
    pub error: Option<String>,
    /// MRI physical point → original histology physical point.
    pub chain: Option<Transform2D>,
}

/// Moving images for Step 2: the prepared slice pulled into the stack frame
/// through its reconstruction rigid. The grid keeps the slice's size and is
/// recentred where the slice lands.
fn stacked_moving(slice: &PreparedSlice, recon: &RigidTransform2D) -> Result<SliceImages> {
    let g = slice.histology.mask.grid();
    let c = recon.inverse().apply(g.center());
    let s = g.spacing();
    let origin = [
        c[0] - (g.width() - 1) as f64 * s[0] / 2.0,
        c[1] - (g.height() - 1) as f64 * s[1] / 2.0,
    ];
    let grid = Grid2D::new(g.width(), g.height(), s, origin)?;
    let t: Transform2D = (*recon).into();
    let mask = resample_label(&slice.histology.mask, &grid, &t)?;
    let gray = resample_scalar(&slice.histology.gray, &grid, &t, Interpolation::Linear, 0.0)?.masked(&mask)?;
    SliceImages::new(gray, mask)
}

fn register_one(slice: &PreparedSlice, recon: &RigidTransform2D, profile: &RegistrationProfile) -> SliceOutcome {
    let run = || -> Result<(SlicePairResult, Transform2D)> {
        let moving = if *recon == RigidTransform2D::identity() {
            slice.histology.clone()
        } else {
            stacked_moving(slice, recon)?
        };
        let pair = register_slice_pair(&slice.mri, &moving, profile)?;
        let chain = Transform2D::chain([pair.transform(), (*recon).into(), slice.gross.clone()])?;
        Ok((pair, chain))
    };
    let (result, error, chain) = match run() {
        Ok((p, c)) => (Some(p), None, Some(c)),
        Err(e) => {
            let e = Error::SliceFailed {
                slice: slice.histology_index,
                message: e.to_string(),
            };
            warn!("{e}");
            (None, Some(e.to_string()), None)
        }
    };
    SliceOutcome {
        histology_index: slice.histology_index,
        mri_slice_index: slice.mri_slice_index,
        recon: *recon,
        gross: slice.gross.clone(),
        result,
        error,
        chain,
    }
}

/// Per-slice MRI registration, in parallel on the current rayon pool.
/// Failures are recorded per slice; the remaining slices still run.
pub fn register_case(
    prepared: &PreparedCase,
    recon: Option<&Reconstruction>,
    profile: &RegistrationProfile,
) -> Vec<SliceOutcome> {
    let identity = RigidTransform2D::identity();
    prepared
        .slices
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let r = match recon {
                Some(r) if !profile.fast_mode => &r.transforms[k],
                _ => &identity,
            };
            register_one(s, r, profile)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Step 3

/// Histology content resampled onto the native MRI geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct MappedCase {
    pub prostate: LabelVolume3D,
    pub cancer: Option<LabelVolume3D>,
    pub urethra: Option<LabelVolume3D>,
    pub rgb: RgbVolume3D,
    /// Histology landmarks in MRI physical coordinates, per MRI slice.
    pub landmarks: BTreeMap<usize, PointSet2D>,
    pub warnings: Vec<String>,
}

pub fn map_labels(inputs: &CaseInputs, outcomes: &[SliceOutcome]) -> Result<MappedCase> {
    let g = *inputs.t2.grid();
    let [_, _, m] = inputs.t2.size();
    let (zs, zo) = (inputs.t2.spacing()[2], inputs.t2.origin()[2]);
    let mut prostate = LabelVolume3D::filled(g, zs, zo, m, 0)?;
    let any_cancer = inputs.slices.iter().any(|s| s.cancer.is_some());
    let any_urethra = inputs.slices.iter().any(|s| s.urethra.is_some());
    let mut cancer = any_cancer.then(|| LabelVolume3D::filled(g, zs, zo, m, 0)).transpose()?;
    let mut urethra = any_urethra.then(|| LabelVolume3D::filled(g, zs, zo, m, 0)).transpose()?;
    let mut rgb = RgbVolume3D::filled(g, zs, zo, m, [0.0; 3])?;
    let mut landmarks = BTreeMap::new();
    let mut warnings = Vec::new();

    for o in outcomes {
        let Some(chain) = &o.chain else { continue };
        let s = &inputs.slices[o.histology_index];
        let k = o.mri_slice_index;
        prostate.set_slice(k, resample_label(&s.mask.foreground(), &g, chain)?)?;
        rgb.set_slice(k, resample_rgb(&s.rgb.masked(&s.mask)?, &g, chain, Interpolation::Linear, [0.0; 3])?)?;
        if let (Some(vol), Some(l)) = (cancer.as_mut(), &s.cancer) {
            vol.set_slice(k, resample_label(l, &g, chain)?)?;
        }
        if let (Some(vol), Some(l)) = (urethra.as_mut(), &s.urethra) {
            vol.set_slice(k, resample_label(l, &g, chain)?)?;
        }
        if let Some(set) = &s.landmarks {
            let mut points = Vec::new();
            for l in &set.points {
                match chain.invert_point(l.point()) {
                    Ok(q) => points.push(crate::image::Landmark::new(l.label.clone(), q)),
                    Err(e) => warnings.push(format!(
                        "slice {}: landmark '{}' could not be mapped ({e})",
                        o.histology_index, l.label
                    )),
                }
            }
            landmarks.insert(k, PointSet2D::new(points)?);
        }
    }
    Ok(MappedCase {
        prostate,
        cancer,
        urethra,
        rgb,
        landmarks,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Whole case

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub preprocess_s: f64,
    pub reconstruct_s: f64,
    pub register_s: f64,
    pub map_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub case_id: String,
    pub profile: RegistrationProfile,
    pub reconstruction: Reconstruction,
    pub outcomes: Vec<SliceOutcome>,
    pub mapped: MappedCase,
    pub timings: Timings,
    pub warnings: Vec<String>,
}

impl CaseResult {
    pub fn failed_slices(&self) -> Vec<&SliceOutcome> {
        self.outcomes.iter().filter(|o| o.error.is_some()).collect()
    }
}

/// Steps 0–3. Step 1 is skipped in fast mode or when the profile disables it.
pub fn run_case(inputs: &CaseInputs, profile: &RegistrationProfile) -> Result<(PreparedCase, CaseResult)> {
    profile.validate()?;
    let t0 = Instant::now();
    let prepared = preprocess(inputs, profile)?;
    let t1 = Instant::now();
    let reconstruction = if profile.reconstruct && !profile.fast_mode {
        let mut recon_profile = profile.clone();
        recon_profile.mask_metric = MaskMetric::Indicator;
        reconstruct_stack(&prepared, &recon_profile)?
    } else {
        Reconstruction::identity(prepared.slices.len())
    };
    let t2 = Instant::now();
    let outcomes = register_case(&prepared, Some(&reconstruction), profile);
    let t3 = Instant::now();
    let mapped = map_labels(inputs, &outcomes)?;
    let t4 = Instant::now();

    let mut warnings = reconstruction.warnings.clone();
    for o in &outcomes {
        if let Some(e) = &o.error {
            warnings.push(e.clone());
        }
        if let Some(r) = &o.result {
            warnings.extend(r.warnings.iter().map(|w| format!("slice {}: {w}", o.histology_index)));
        }
    }
    warnings.extend(mapped.warnings.iter().cloned());
    let secs = |a: Instant, b: Instant| (b - a).as_secs_f64();
    let timings = Timings {
        preprocess_s: secs(t0, t1),
        reconstruct_s: secs(t1, t2),
        register_s: secs(t2, t3),
        map_s: secs(t3, t4),
        total_s: secs(t0, t4),
    };
    info!(
        "case {}: {} slices in {:.1}s ({} failed)",
        inputs.case_id,
        outcomes.len(),
        timings.total_s,
        outcomes.iter().filter(|o| o.error.is_some()).count()
    );
    Ok((
        prepared,
        CaseResult {
            case_id: inputs.case_id.clone(),
            profile: profile.clone(),
            reconstruction,
            outcomes,
            mapped,
            timings,
            warnings,
        },
    ))
}

/// Run `f` on a dedicated pool of `threads` workers (`None`: rayon default).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidArgument("thread count must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}"))),
    }
}

/// Accuracy of a finished case against the MRI reference annotations, over
/// the MRI slices that have a histology correspondence.
pub fn evaluate_case(inputs: &CaseInputs, result: &CaseResult, agg: HausdorffAggregation) -> Result<MetricReport> {
    let idx: Vec<usize> = inputs.slices.iter().map(|s| s.mri_slice_index).collect();
    let pick = |v: &LabelVolume3D| -> Result<Vec<LabelMask2D>> {
        idx.iter().map(|&k| Ok(v.slice(k)?.foreground())).collect()
    };
    let reference = pick(&inputs.prostate)?;
    let mapped = pick(&result.mapped.prostate)?;
    let (ur, um) = match (&inputs.urethra, &result.mapped.urethra) {
        (Some(a), Some(b)) => (Some(pick(a)?), Some(pick(b)?)),
        _ => (None, None),
    };
    let (lr, lm): (Vec<PointSet2D>, Vec<PointSet2D>) = idx
        .iter()
        .filter_map(|k| Some((inputs.mri_landmarks.get(k)?.clone(), result.mapped.landmarks.get(k)?.clone())))
        .unzip();
    let masks = CaseMasks {
        mri_prostate: &reference,
        mapped_prostate: &mapped,
        mri_urethra: ur.as_deref(),
        mapped_urethra: um.as_deref(),
        mri_landmarks: (!lr.is_empty()).then_some(lr.as_slice()),
        mapped_landmarks: (!lm.is_empty()).then_some(lm.as_slice()),
    };
    MetricReport::compute(&inputs.case_id, &masks, agg)
}

// ---------------------------------------------------------------------------
// Outputs

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceLogEntry {
    pub histology_index: usize,
    pub mri_slice_index: usize,
    pub ok: bool,
    pub error: Option<String>,
    pub degraded: bool,
    pub dice_input: Option<f64>,
    pub final_dice: Option<f64>,
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLog {
    pub case_id: String,
    pub version: String,
    pub profile: RegistrationProfile,
    pub timings: Timings,
    pub reconstruction: Reconstruction,
    pub slices: Vec<SliceLogEntry>,
    pub warnings: Vec<String>,
}

impl RunLog {
    pub fn from_result(result: &CaseResult) -> Self {
        RunLog {
            case_id: result.case_id.clone(),
            version: VERSION.to_string(),
            profile: result.profile.clone(),
            timings: result.timings,
            reconstruction: result.reconstruction.clone(),
            slices: result
                .outcomes
                .iter()
                .map(|o| SliceLogEntry {
                    histology_index: o.histology_index,
                    mri_slice_index: o.mri_slice_index,
                    ok: o.error.is_none(),
                    error: o.error.clone(),
                    degraded: o.result.as_ref().is_some_and(|r| r.degraded),
                    dice_input: o.result.as_ref().map(|r| r.dice_input),
                    final_dice: o.result.as_ref().map(|r| r.final_dice),
                    wall_time_s: o.result.as_ref().map(|r| r.wall_time_s),
                })
                .collect(),
            warnings: result.warnings.clone(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read per-slice outcomes written by [`write_case_outputs`].
pub fn read_slice_outcomes(dir: impl AsRef<Path>) -> Result<Vec<SliceOutcome>> {
    let dir = dir.as_ref().join("transforms");
    if !dir.exists() {
        return Err(Error::MissingFile(dir));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|source| Error::Json { path: p.clone(), source })
        })
        .collect()
}

/// Write mapped volumes (NIfTI), per-slice transform JSON, mapped landmarks,
/// the run log and, if given, the metrics CSV row. With `verbose`, each
/// stage's metric trace goes to `traces/`.
pub fn write_case_outputs(
    dir: impl AsRef<Path>,
    result: &CaseResult,
    metrics: Option<&MetricReport>,
    verbose: bool,
) -> Result<()> {
    let dir = dir.as_ref();
    let tdir = dir.join("transforms");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let m = &result.mapped;
    write_label_volume(dir.join("mapped_prostate.nii.gz"), &m.prostate)?;
    if let Some(v) = &m.cancer {
        write_label_volume(dir.join("mapped_cancer.nii.gz"), v)?;
    }
    if let Some(v) = &m.urethra {
        write_label_volume(dir.join("mapped_urethra.nii.gz"), v)?;
    }
    write_rgb_volume(dir.join("registered_histology.nii.gz"), &m.rgb)?;
    for o in &result.outcomes {
        write_json(&tdir.join(format!("slice_{:03}.json", o.histology_index)), o)?;
    }
    write_json(&dir.join("mapped_landmarks.json"), &m.landmarks)?;
    write_json(&dir.join("run_log.json"), &RunLog::from_result(result))?;
    if let Some(r) = metrics {
        crate::evaluation::write_metrics_csv(&dir.join("metrics.csv"), &[r.csv_row()])?;
        write_json(&dir.join("metrics.json"), r)?;
    }
    if verbose {
        let trace_dir = dir.join("traces");
        fs::create_dir_all(&trace_dir).map_err(|e| Error::io(&trace_dir, e))?;
        for o in &result.outcomes {
            let Some(r) = &o.result else { continue };
            for st in &r.stages {
                let path = trace_dir.join(format!("slice_{:03}_{}.csv", o.histology_index, st.stage));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["iteration", "value"])?;
                for (i, v) in st.trace.iter().enumerate() {
                    w.write_record([i.to_string(), v.to_string()])?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::dice;
    use crate::image::{center_of_mass, Image2D, Landmark};

    fn ellipse_mask(g: Grid2D, c: Point2, a: f64, b: f64, angle: f64) -> LabelMask2D {
        let (s, co) = angle.sin_cos();
        LabelMask2D::from_fn(g, |x, y| {
            let p = g.index_to_physical(x as f64, y as f64);
            let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
            let (u, v) = (co * dx + s * dy, -s * dx + co * dy);
            u16::from((u / a).powi(2) + (v / b).powi(2) <= 1.0)
        })
    }

    fn l_shape(g: Grid2D) -> LabelMask2D {
        LabelMask2D::from_fn(g, |x, y| {
            let p = g.index_to_physical(x as f64, y as f64);
            let vertical = (4.0..8.0).contains(&p[0]) && (4.0..20.0).contains(&p[1]);
            let foot = (4.0..16.0).contains(&p[0]) && (16.0..20.0).contains(&p[1]);
            u16::from(vertical || foot)
        })
    }

    fn rgb_from(mask: &LabelMask2D) -> RgbImage2D {
        Image2D::from_fn(*mask.grid(), |x, y| {
            if mask.get(x, y) != 0 {
                [200.0, 120.0 + (x % 7) as f64 * 5.0, 160.0]
            } else {
                [255.0; 3]
            }
        })
    }

    /// MRI with `masks.len()` slices on a 0.4 mm grid; histology slices are
    /// copies of the MRI masks on a 0.2 mm grid.
    fn synthetic_case(masks: &[LabelMask2D], hist: Vec<LabelMask2D>) -> CaseInputs {
        let g = *masks[0].grid();
        let t2: Vec<ScalarImage2D> = masks.iter().map(|m| m.map(|v| if v > 0 { 120.0 } else { 20.0 })).collect();
        let n = hist.len();
        CaseInputs {
            case_id: "synthetic".into(),
            t2: ScalarVolume3D::new(g, 4.0, 0.0, t2).unwrap(),
            prostate: LabelVolume3D::new(g, 4.0, 0.0, masks.to_vec()).unwrap(),
            urethra: None,
            cancer: None,
            mri_landmarks: BTreeMap::new(),
            slices: hist
                .into_iter()
                .enumerate()
                .map(|(i, m)| HistologySlice {
                    rgb: rgb_from(&m),
                    mask: m,
                    cancer: None,
                    urethra: None,
                    landmarks: None,
                    mri_slice_index: i * masks.len() / n.max(1),
                    rotation_deg: 0.0,
                    flip_lr: false,
                })
                .collect(),
        }
    }

    fn second_moments(mask: &LabelMask2D) -> [f64; 3] {
        let c = center_of_mass(mask, 1).unwrap();
        let (mut xx, mut yy, mut xy, mut n) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(x, y) == 1 {
                    let p = mask.grid().index_to_physical(x as f64, y as f64);
                    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                    xx += dx * dx;
                    yy += dy * dy;
                    xy += dx * dy;
                    n += 1.0;
                }
            }
        }
        [xx / n, yy / n, xy / n]
    }

    const MANIFEST: &str = r#"{
        "case_id": "case01",
        "mri": {"t2": "t2.nii.gz", "prostate_mask": "mask.nii.gz"},
        "histology": {"slices": [
            {"image": "h0.png", "prostate_mask": "m0.png", "mri_slice_index": 2,
             "rotation_deg": 90.0, "flip_lr": true, "pixel_spacing_mm": 0.02},
            {"image": "h1.png", "prostate_mask": "m1.png", "cancer_mask": "c1.png",
             "urethra_mask": "u1.png", "landmarks": "l1.json", "mri_slice_index": 4,
             "rotation_deg": -10.5, "flip_lr": false, "pixel_spacing_mm": 0.02}
        ]}
    }"#;

    #[test]
    fn manifest_parses_exact_field_names() {
        let m: CaseManifest = serde_json::from_str(MANIFEST).unwrap();
        m.validate().unwrap();
        assert_eq!(m.histology.slices.len(), 2);
        assert_eq!(m.histology.slices[1].cancer_mask.as_deref(), Some(Path::new("c1.png")));
        assert!(m.histology.slices[0].flip_lr);
        let back: CaseManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_validation_errors_name_the_field() {
        let mut m: CaseManifest = serde_json::from_str(MANIFEST).unwrap();
        m.histology.slices[1].mri_slice_index = 2;
        match m.validate() {
            Err(Error::Manifest { field, .. }) => assert_eq!(field, "histology.slices[1].mri_slice_index"),
            other => panic!("{other:?}"),
        }
        let mut m: CaseManifest = serde_json::from_str(MANIFEST).unwrap();
        m.histology.slices.clear();
        assert!(matches!(m.validate(), Err(Error::Manifest { .. })));
        let typo = MANIFEST.replace("flip_lr\": true", "flip\": true");
        assert!(serde_json::from_str::<CaseManifest>(&typo).is_err());
    }

    #[test]
    fn loading_reports_missing_files_and_bad_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, MANIFEST).unwrap();
        let m = CaseManifest::load(&path).unwrap();
        assert!(m.mri.t2.starts_with(dir.path()));
        match load_case(&m) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("t2.nii.gz")),
            other => panic!("{other:?}"),
        }

        let g = Grid2D::new(40, 40, [0.4, 0.4], [0.0, 0.0]).unwrap();
        let mask = ellipse_mask(g, [8.0, 8.0], 5.0, 4.0, 0.0);
        let hist = Grid2D::new(80, 80, [0.2, 0.2], [0.0, 0.0]).unwrap();
        let mut case = synthetic_case(&[mask.clone(), mask.clone()], vec![ellipse_mask(hist, [8.0, 8.0], 5.0, 4.0, 0.0)]);
        let saved = save_case(&case, dir.path().join("ok")).unwrap();
        let loaded = load_case(&CaseManifest::load(dir.path().join("ok/manifest.json")).unwrap()).unwrap();
        assert_eq!(loaded.slices[0].mask, case.slices[0].mask);
        assert_eq!(loaded.t2.slices(), case.t2.slices());
        assert_eq!(saved.histology.slices[0].pixel_spacing_mm, 0.2);

        case.slices[0].mri_slice_index = 5;
        assert!(matches!(case.validate(), Err(Error::SliceIndexOutOfRange { index: 5, count: 2 })));
        case.slices[0].mri_slice_index = 0;
        case.slices[0].mask = LabelMask2D::filled(hist, 0);
        assert!(matches!(case.validate(), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn no_gross_correction_only_resamples() {
        let g = Grid2D::new(40, 40, [0.4, 0.4], [0.0, 0.0]).unwrap();
        let hist = Grid2D::new(80, 80, [0.2, 0.2], [0.0, 0.0]).unwrap();
        let mask = ellipse_mask(hist, [8.0, 8.0], 5.0, 3.0, 0.3);
        let case = synthetic_case(&[ellipse_mask(g, [8.0, 8.0], 5.0, 4.0, 0.0)], vec![mask.clone()]);
        let p = preprocess(&case, &RegistrationProfile::standard()).unwrap();
        let s = &p.slices[0];
        let direct = resample_label(&mask, s.histology.mask.grid(), &Transform2D::identity()).unwrap();
        assert_eq!(s.histology.mask, direct);
        assert!(s.histology.gray.data().iter().zip(s.histology.mask.data()).all(|(&v, &m)| m != 0 || v == 0.0));
    }

    #[test]
    fn flip_twice_round_trips() {
        let g = Grid2D::new(40, 40, [0.4, 0.4], [0.0, 0.0]).unwrap();
        let hist = Grid2D::new(120, 120, [0.2, 0.2], [0.0, 0.0]).unwrap();
        let mri = ellipse_mask(g, [8.0, 8.0], 5.0, 4.0, 0.0);
        let mut case = synthetic_case(&[mri.clone()], vec![l_shape(hist)]);
        case.slices[0].flip_lr = true;
        let once = preprocess(&case, &RegistrationProfile::standard()).unwrap();
        let mut again = case.clone();
        again.slices[0].mask = once.slices[0].histology.mask.clone();
        again.slices[0].rgb = once.slices[0].rgb.clone();
        let twice = preprocess(&again, &RegistrationProfile::standard()).unwrap();
        let out = &twice.slices[0].histology.mask;
        let original = resample_label(&case.slices[0].mask, out.grid(), &Transform2D::identity()).unwrap();
        assert!(dice(out, &original, 1).unwrap() >= 0.995);
        // A single flip mirrors the L.
        let first = &once.slices[0].histology.mask;
        let orig_on_first = resample_label(&case.slices[0].mask, first.grid(), &Transform2D::identity()).unwrap();
        assert!(dice(first, &orig_on_first, 1).unwrap() < 0.6);
    }

    #[test]
    fn quarter_turn_preserves_centroid_and_swaps_moments() {
        let g = Grid2D::new(40, 40, [0.4, 0.4], [0.0, 0.0]).unwrap();
        let hist = Grid2D::new(120, 120, [0.2, 0.2], [0.0, 0.0]).unwrap();
        let l = l_shape(hist);
        let mut case = synthetic_case(&[ellipse_mask(g, [8.0, 8.0], 5.0, 4.0, 0.0)], vec![l.clone()]);
        case.slices[0].rotation_deg = 90.0;
        let p = preprocess(&case, &RegistrationProfile::standard()).unwrap();
        let out = &p.slices[0].histology.mask;
        let (c0, c1) = (center_of_mass(&l, 1).unwrap(), center_of_mass(out, 1).unwrap());
        assert!((c0[0] - c1[0]).hypot(c0[1] - c1[1]) < 0.2, "{c0:?} {c1:?}");
        let (m0, m1) = (second_moments(&l), second_moments(out));
        assert!((m0[0] - m1[1]).abs() < 0.05 * m0[0], "{m0:?} {m1:?}");
        assert!((m0[1] - m1[0]).abs() < 0.05 * m0[1], "{m0:?} {m1:?}");
        assert!((m0[2] + m1[2]).abs() < 0.05 * m0[2].abs(), "{m0:?} {m1:?}");
    }

    #[test]
    fn landmarks_follow_the_gross_correction() {
        let g = Grid2D::new(40, 40, [0.4, 0.4], [0.0, 0.0]).unwrap();
        let hist = Grid2D::new(80, 80, [0.2, 0.2], [0.0, 0.0]).unwrap();
        let mut case = synthetic_case(&[ellipse_mask(g, [8.0, 8.0], 5.0, 4.0, 0.0)], vec![ellipse_mask(hist, [8.0, 8.0], 5.0, 3.0, 0.0)]);
        case.slices[0].rotation_deg = 30.0;
        case.slices[0].flip_lr = true;
        case.slices[0].landmarks = Some(PointSet2D::new(vec![Landmark::new("a", [10.0, 9.0])]).unwrap());
        let p = preprocess(&case, &RegistrationProfile::standard()).unwrap();
        let s = &p.slices[0];
        let q = s.landmarks.as_ref().unwrap().points[0].point();
        let back = s.gross.apply(q);
        assert!((back[0] - 10.0).abs() < 1e-9 && (back[1] - 9.0).abs() < 1e-9);
    }

    /// Prostate-sized stack: 36 × 24 mm section with an asymmetric bump.
    fn stack_case(angles_deg: &[f64]) -> PreparedCase {
        let g = Grid2D::new(125, 125, [0.4, 0.4], [0.0, 0.0]).unwrap();
        let hist = Grid2D::new(250, 250, [0.2, 0.2], [0.0, 0.0]).unwrap();
        let c = [25.0, 25.0];
        let mri: Vec<LabelMask2D> = angles_deg.iter().map(|_| ellipse_mask(g, c, 18.0, 12.0, 0.0)).collect();
        let hist_masks = angles_deg
            .iter()
            .map(|&a| {
                let base = LabelMask2D::from_fn(hist, |x, y| {
                    let p = hist.index_to_physical(x as f64, y as f64);
                    let e = ((p[0] - c[0]) / 18.0).powi(2) + ((p[1] - c[1]) / 12.0).powi(2) <= 1.0;
                    let bump = (p[0] - 35.0).hypot(p[1] - 16.0) < 5.0;
                    u16::from(e || bump)
                });
                // Content rotated by `a`: sample the base at R(−a)(p).
                resample_label(&base, &hist, &RigidTransform2D::about(-a.to_radians(), c).into()).unwrap()
            })
            .collect();
        let case = synthetic_case(&mri, hist_masks);
        preprocess(&case, &RegistrationProfile::standard()).unwrap()
    }

    #[test]
    fn single_slice_reconstruction_is_identity() {
        let p = stack_case(&[0.0]);
        let r = reconstruct_stack(&p, &RegistrationProfile::standard()).unwrap();
        assert_eq!(r.transforms, vec![RigidTransform2D::identity()]);
        assert_eq!(r.middle, 0);
    }

    #[test]
    fn identical_stack_reconstructs_to_identity() {
        let p = stack_case(&[0.0; 5]);
        let r = reconstruct_stack(&p, &RegistrationProfile::standard()).unwrap();
        assert_eq!(r.middle, 2);
        for t in &r.transforms {
            assert!(t.angle.abs() < 1e-3 && t.translation[0].abs() < 1e-3 && t.translation[1].abs() < 1e-3, "{t:?}");
        }
    }

    #[test]
    fn rotated_slice_is_recovered_in_the_stack() {
        let p = stack_case(&[0.0, 0.0, 0.0, 8.0, 0.0]);
        let r = reconstruct_stack(&p, &RegistrationProfile::standard()).unwrap();
        let deg: Vec<f64> = r.transforms.iter().map(|t| t.angle.to_degrees()).collect();
        assert!((deg[3] - 8.0).abs() < 0.5, "{deg:?}");
        for k in [0, 1, 2, 4] {
            assert!(deg[k].abs() < 0.5, "{deg:?}");
        }
        // The slice after the rotated one lines up with the stack again.
        let probe = p.slices[4].histology.mask.grid().center();
        let moved = r.transforms[4].apply(probe);
        assert!((moved[0] - probe[0]).hypot(moved[1] - probe[1]) < 0.2);
    }

    #[test]
    fn identity_chains_map_labels_in_place() {
        let g = Grid2D::new(40, 40, [0.4, 0.4], [0.0, 0.0]).unwrap();
        let hist = Grid2D::new(80, 80, [0.2, 0.2], [0.0, 0.0]).unwrap();
        let mri = vec![ellipse_mask(g, [8.0, 8.0], 5.0, 4.0, 0.0); 3];
        let hm = ellipse_mask(hist, [7.0, 8.5], 4.0, 3.0, 0.2);
        let mut case = synthetic_case(&mri, vec![hm.clone()]);
        case.slices[0].mri_slice_index = 1;
        case.slices[0].landmarks = Some(PointSet2D::new(vec![Landmark::new("apex", [6.0, 7.0])]).unwrap());
        let outcome = SliceOutcome {
            histology_index: 0,
            mri_slice_index: 1,
            recon: RigidTransform2D::identity(),
            gross: Transform2D::identity(),
            result: None,
            error: None,
            chain: Some(Transform2D::identity()),
        };
        let mapped = map_labels(&case, &[outcome]).unwrap();
        let direct = resample_label(&hm, &g, &Transform2D::identity()).unwrap();
        assert!(dice(mapped.prostate.slice(1).unwrap(), &direct, 1).unwrap() >= 0.999);
        assert_eq!(mapped.prostate.slice(0).unwrap().foreground_count(), 0);
        assert_eq!(mapped.prostate.slice(2).unwrap().foreground_count(), 0);
        assert_eq!(mapped.landmarks[&1].points[0].point(), [6.0, 7.0]);
        assert!(mapped.cancer.is_none());
    }

    #[test]
    fn full_case_runs_and_outputs_reproduce_offline() {
        let g = Grid2D::new(50, 50, [0.4, 0.4], [0.0, 0.0]).unwrap();
        let hist = Grid2D::new(100, 100, [0.2, 0.2], [0.0, 0.0]).unwrap();
        let mri = vec![
            ellipse_mask(g, [10.0, 10.0], 6.0, 4.5, 0.0),
            ellipse_mask(g, [10.0, 10.0], 7.0, 5.0, 0.0),
            ellipse_mask(g, [10.0, 10.0], 6.0, 4.5, 0.0),
        ];
        let hist_masks = vec![
            ellipse_mask(hist, [9.0, 10.5], 6.0, 4.5, 0.1),
            ellipse_mask(hist, [10.5, 9.5], 7.0, 5.0, -0.08),
            ellipse_mask(hist, [10.0, 10.0], 6.0, 4.5, 0.05),
        ];
        let mut case = synthetic_case(&mri, hist_masks);
        for (i, s) in case.slices.iter_mut().enumerate() {
            s.mri_slice_index = i;
        }
        let mut profile = RegistrationProfile::standard();
        profile.stages.deformable = false;
        let (_, result) = run_case(&case, &profile).unwrap();
        assert!(result.failed_slices().is_empty(), "{:?}", result.warnings);
        let report = evaluate_case(&case, &result, HausdorffAggregation::Mean).unwrap();
        assert!(report.dice > 0.95, "{report:?}");

        let dir = tempfile::tempdir().unwrap();
        write_case_outputs(dir.path(), &result, Some(&report), true).unwrap();
        for f in ["mapped_prostate.nii.gz", "registered_histology.nii.gz", "run_log.json", "metrics.csv", "transforms/slice_002.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(dir.path().join("traces/slice_000_rigid.csv").exists());
        let untimed = |mut v: Vec<SliceOutcome>| {
            v.iter_mut().flat_map(|o| o.result.as_mut()).for_each(|r| r.wall_time_s = 0.0);
            v
        };
        // Timings stay in the run log, not in the per-slice JSON.
        let outcomes = read_slice_outcomes(dir.path()).unwrap();
        assert_eq!(outcomes, untimed(result.outcomes.clone()));
        let offline = map_labels(&case, &outcomes).unwrap();
        assert_eq!(offline, result.mapped);

        // Per-slice independence: one worker vs two, and a single slice alone.
        let prepared = preprocess(&case, &profile).unwrap();
        let rec = Reconstruction::identity(3);
        let serial = untimed(with_threads(Some(1), || register_case(&prepared, Some(&rec), &profile)).unwrap());
        let parallel = untimed(with_threads(Some(2), || register_case(&prepared, Some(&rec), &profile)).unwrap());
        assert_eq!(serial, parallel);
        let alone = untimed(vec![register_one(&prepared.slices[1], &rec.transforms[1], &profile)]);
        assert_eq!(alone[0], serial[1]);
    }
}
