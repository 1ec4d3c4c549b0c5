//! Digital phantom: procedural prostate regions, MRI and pathology renderings,
//! simulated slide-preparation degradations and the condition-sweep harness.
//!
//! Both modalities sample one analytic label field, so with zero slice
//! offset and a shared grid the histology labels equal the MRI labels
//! pixel for pixel. Degradations are applied by resampling; the forward
//! map `D(p) = c + (1 - s) R (p - c) + t` is kept per slice as the chain
//! the pipeline should recover (MRI physical → degraded histology physical).
//!
//! Coordinates: `x` left-right, `y` anterior (−) to posterior (+), `z`
//! along the slice axis, all in millimetres.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluation::HausdorffAggregation;
use crate::image::{
    center_of_mass, resample_label, resample_rgb, Grid2D, HistologyStack, Image2D, Interpolation, LabelMask2D,
    LabelVolume3D, Landmark, PointSet2D, RgbImage2D, ScalarVolume3D,
};
use crate::pipeline::{evaluate_case, run_case, save_case, CaseInputs, CaseResult, HistologySlice};
use crate::registration::RegistrationProfile;
use crate::transform::{AffineTransform2D, BSplineFFD2D, Transform2D};
use crate::{Error, Point2, Result};

pub const BACKGROUND: u16 = 0;
pub const PROSTATE: u16 = 1;
pub const PERIPHERAL_ZONE: u16 = 2;
pub const URETHRA: u16 = 3;
pub const CANCER: u16 = 4;

// ---------------------------------------------------------------------------
// Geometry

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    pub fn new(center_mm: [f64; 3], semi_axes_mm: [f64; 3]) -> Self {
        Self { center_mm, semi_axes_mm }
    }

    /// Normalised radius squared: `<= 1` inside.
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center_mm[i]) / self.semi_axes_mm[i]).powi(2))
            .sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    /// In-plane scale of the cross-section at `z` (0 when the plane misses).
    fn section_scale(&self, z: f64) -> f64 {
        let dz = (z - self.center_mm[2]) / self.semi_axes_mm[2];
        (1.0 - dz * dz).max(0.0).sqrt()
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.semi_axes_mm.iter().any(|a| !(a.is_finite() && *a > 0.0))
            || self.center_mm.iter().any(|c| !c.is_finite())
        {
            return Err(Error::DegenerateRegion(format!(
                "{what}: semi-axes {:?} must be finite and positive",
                self.semi_axes_mm
            )));
        }
        Ok(())
    }
}

/// Tube around a centreline that bows anteriorly toward mid-gland:
/// `x = cx`, `y = cy - anterior_offset - bend * (1 - dz^2)` with `dz` the
/// normalised height inside the prostate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UrethraSpec {
    pub radius_mm: f64,
    pub anterior_offset_mm: f64,
    pub bend_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomGeometry {
    /// MRI voxel counts `[K, L, M]`.
    pub size: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Physical position of voxel `(0, 0, 0)`.
    pub origin_mm: [f64; 3],
    pub prostate: Ellipsoid,
    /// Three-lobe modulation of the prostate surface radius: a rounded
    /// anterior apex and a flattened posterior border. Zero gives the plain
    /// ellipsoid, whose in-plane sections leave an affine null direction
    /// for mask-only matching.
    pub prostate_lobe: f64,
    /// Peripheral-zone crescent thickness as a fraction of the
    /// anterior-posterior semi-axis; `None` for no PZ.
    pub peripheral_zone: Option<f64>,
    pub urethra: Option<UrethraSpec>,
    pub cancers: Vec<Ellipsoid>,
    /// MRI slice indices that get a histology section.
    pub histology_slices: Vec<usize>,
    pub histology_spacing_mm: f64,
}

impl Default for PhantomGeometry {
    fn default() -> Self {
        PhantomGeometry {
            size: [160, 160, 13],
            spacing_mm: [0.4, 0.4, 4.0],
            origin_mm: [-31.8, -31.8, -24.0],
            prostate: Ellipsoid::new([0.0; 3], [22.0, 18.0, 20.0]),
            prostate_lobe: 0.08,
            peripheral_zone: Some(0.35),
            urethra: Some(UrethraSpec {
                radius_mm: 1.5,
                anterior_offset_mm: 3.0,
                bend_mm: 3.0,
            }),
            cancers: vec![Ellipsoid::new([8.0, 10.0, 0.0], [6.0, 5.0, 5.0])],
            histology_slices: vec![4, 5, 6, 7, 8],
            histology_spacing_mm: 0.2,
        }
    }
}

impl PhantomGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.size.contains(&0) {
            return Err(Error::InvalidGrid(format!("phantom size {:?}", self.size)));
        }
        if self.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || !(self.histology_spacing_mm.is_finite() && self.histology_spacing_mm > 0.0)
        {
            return Err(Error::InvalidGrid("phantom spacings must be positive".into()));
        }
        self.prostate.check("prostate")?;
        if !(0.0..0.5).contains(&self.prostate_lobe) {
            return Err(Error::DegenerateRegion(format!(
                "prostate lobe amplitude {} must be in [0, 0.5)",
                self.prostate_lobe
            )));
        }
        for (i, c) in self.cancers.iter().enumerate() {
            c.check(&format!("cancer {i}"))?;
            if !self.in_prostate(c.center_mm) {
                return Err(Error::DegenerateRegion(format!("cancer {i} is centred outside the prostate")));
            }
        }
        if let Some(t) = self.peripheral_zone {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::DegenerateRegion(format!("peripheral zone thickness {t} must be in (0, 1)")));
            }
        }
        if let Some(u) = self.urethra {
            if !(u.radius_mm.is_finite() && u.radius_mm > 0.0) {
                return Err(Error::DegenerateRegion(format!("urethra radius {}", u.radius_mm)));
            }
        }
        if let Some(&k) = self.histology_slices.iter().find(|&&k| k >= self.size[2]) {
            return Err(Error::SliceIndexOutOfRange { index: k, count: self.size[2] });
        }
        if self.histology_slices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("histology slice indices must strictly increase".into()));
        }
        Ok(())
    }

    pub fn mri_grid(&self) -> Result<Grid2D> {
        Grid2D::new(
            self.size[0],
            self.size[1],
            [self.spacing_mm[0], self.spacing_mm[1]],
            [self.origin_mm[0], self.origin_mm[1]],
        )
    }

    /// Same field of view as the MRI, at the histology spacing.
    pub fn histology_grid(&self) -> Result<Grid2D> {
        let mri = self.mri_grid()?;
        let s = self.histology_spacing_mm;
        if s == self.spacing_mm[0] && s == self.spacing_mm[1] {
            return Ok(mri);
        }
        let lo = mri.lower_edge();
        let ext = mri.extent();
        Grid2D::new(
            (ext[0] / s).round() as usize,
            (ext[1] / s).round() as usize,
            [s, s],
            [lo[0] + s / 2.0, lo[1] + s / 2.0],
        )
    }

    pub fn z_of(&self, k: usize) -> f64 {
        self.origin_mm[2] + k as f64 * self.spacing_mm[2]
    }

    fn z_range(&self) -> (f64, f64) {
        let h = self.spacing_mm[2] / 2.0;
        (self.z_of(0) - h, self.z_of(self.size[2] - 1) + h)
    }

    fn urethra_center(&self, u: &UrethraSpec, z: f64) -> Point2 {
        let p = &self.prostate;
        let dz = ((z - p.center_mm[2]) / p.semi_axes_mm[2]).clamp(-1.0, 1.0);
        [
            p.center_mm[0],
            p.center_mm[1] - u.anterior_offset_mm - u.bend_mm * (1.0 - dz * dz),
        ]
    }

    /// Normalised prostate coordinates and the lobed surface radius there.
    fn prostate_radius(&self, p: [f64; 3]) -> ([f64; 3], f64) {
        let e = &self.prostate;
        let n = [0, 1, 2].map(|i| (p[i] - e.center_mm[i]) / e.semi_axes_mm[i]);
        // sin(3θ) peaks at θ = -90°, i.e. anteriorly.
        (n, 1.0 + self.prostate_lobe * (3.0 * n[1].atan2(n[0])).sin())
    }

    pub fn in_prostate(&self, p: [f64; 3]) -> bool {
        let (n, r) = self.prostate_radius(p);
        n[0] * n[0] + n[1] * n[1] + n[2] * n[2] <= r * r
    }

    fn in_peripheral_zone(&self, t: f64, p: [f64; 3]) -> bool {
        let pr = &self.prostate;
        if p[1] < pr.center_mm[1] {
            return false;
        }
        let mut inner = *pr;
        inner.center_mm[1] -= t * pr.semi_axes_mm[1];
        !inner.contains(p)
    }

    /// Region label at a physical point, priority cancer > urethra > PZ >
    /// prostate; nothing outside the prostate.
    pub fn label_at(&self, p: [f64; 3]) -> u16 {
        if !self.in_prostate(p) {
            return BACKGROUND;
        }
        if self.cancers.iter().any(|c| c.contains(p)) {
            return CANCER;
        }
        if let Some(u) = &self.urethra {
            let c = self.urethra_center(u, p[2]);
            if (p[0] - c[0]).hypot(p[1] - c[1]) <= u.radius_mm {
                return URETHRA;
            }
        }
        match self.peripheral_zone {
            Some(t) if self.in_peripheral_zone(t, p) => PERIPHERAL_ZONE,
            _ => PROSTATE,
        }
    }

    fn label_slice(&self, grid: &Grid2D, z: f64) -> LabelMask2D {
        LabelMask2D::from_fn(*grid, |x, y| {
            let q = grid.index_to_physical(x as f64, y as f64);
            self.label_at([q[0], q[1], z])
        })
    }

    /// Urethra centre, cancer centroid(s) and the most anterior prostate
    /// boundary point of the section at `z`.
    pub fn landmarks_at(&self, z: f64) -> Vec<Landmark> {
        let p = &self.prostate;
        let w = (z - p.center_mm[2]) / p.semi_axes_mm[2];
        let apex = (1.0 + self.prostate_lobe).powi(2) - w * w;
        if apex <= 0.0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        if let Some(u) = &self.urethra {
            let c = self.urethra_center(u, z);
            if self.label_at([c[0], c[1], z]) == URETHRA {
                out.push(Landmark::new("urethra", c));
            }
        }
        for (i, c) in self.cancers.iter().enumerate() {
            if c.section_scale(z) > 0.0 {
                out.push(Landmark::new(format!("cancer_{i}"), [c.center_mm[0], c.center_mm[1]]));
            }
        }
        out.push(Landmark::new(
            "anterior",
            [p.center_mm[0], p.center_mm[1] - p.semi_axes_mm[1] * apex.sqrt()],
        ));
        out
    }
}

/// Region labels sampled on the MRI grid.
#[derive(Clone, Debug)]
pub struct PhantomRegions {
    pub geometry: PhantomGeometry,
    pub labels: LabelVolume3D,
}

pub fn synthesize_regions(geom: &PhantomGeometry) -> Result<PhantomRegions> {
    geom.validate()?;
    let grid = geom.mri_grid()?;
    let slices: Vec<LabelMask2D> = (0..geom.size[2])
        .into_par_iter()
        .map(|k| geom.label_slice(&grid, geom.z_of(k)))
        .collect();
    let labels = LabelVolume3D::new(grid, geom.spacing_mm[2], geom.origin_mm[2], slices)?;

    let mut counts = [0usize; 5];
    for &v in labels.voxels() {
        counts[v as usize] += 1;
    }
    let mut required = vec![("prostate", counts[1] + counts[2] + counts[3] + counts[4])];
    if geom.peripheral_zone.is_some() {
        required.push(("peripheral zone", counts[PERIPHERAL_ZONE as usize]));
    }
    if geom.urethra.is_some() {
        required.push(("urethra", counts[URETHRA as usize]));
    }
    if !geom.cancers.is_empty() {
        required.push(("cancer", counts[CANCER as usize]));
    }
    if let Some((name, _)) = required.iter().find(|(_, n)| *n == 0) {
        return Err(Error::DegenerateRegion(format!("{name} covers no voxel")));
    }
    Ok(PhantomRegions {
        geometry: geom.clone(),
        labels,
    })
}

// ---------------------------------------------------------------------------
// Rendering

/// Per-label mean MRI intensity and pathology colour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Appearance {
    pub mri_intensity: BTreeMap<u16, f64>,
    pub pathology_rgb: BTreeMap<u16, [f64; 3]>,
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance {
            mri_intensity: BTreeMap::from([
                (BACKGROUND, 10.0),
                (PROSTATE, 90.0),
                (PERIPHERAL_ZONE, 130.0),
                (URETHRA, 170.0),
                (CANCER, 60.0),
            ]),
            pathology_rgb: BTreeMap::from([
                (BACKGROUND, [245.0, 245.0, 245.0]),
                (PROSTATE, [235.0, 180.0, 200.0]),
                (PERIPHERAL_ZONE, [215.0, 135.0, 170.0]),
                (URETHRA, [150.0, 90.0, 170.0]),
                (CANCER, [100.0, 50.0, 120.0]),
            ]),
        }
    }
}

fn lookup<T: Copy>(table: &BTreeMap<u16, T>, label: u16) -> Result<T> {
    table.get(&label).copied().ok_or(Error::MissingTableEntry(label))
}

fn noise(sigma: f64) -> Result<Option<Normal<f64>>> {
    if sigma == 0.0 {
        return Ok(None);
    }
    Normal::new(0.0, sigma)
        .map(Some)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma {sigma}: {e}")))
}

pub fn render_mri_phantom(
    regions: &PhantomRegions,
    intensity: &BTreeMap<u16, f64>,
    noise_sigma: f64,
    seed: u64,
) -> Result<ScalarVolume3D> {
    let labels = &regions.labels;
    for l in [BACKGROUND, PROSTATE, PERIPHERAL_ZONE, URETHRA, CANCER] {
        if labels.voxels().any(|&v| v == l) {
            lookup(intensity, l)?;
        }
    }
    let normal = noise(noise_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slices = Vec::with_capacity(labels.depth());
    for s in labels.slices() {
        let mut data = Vec::with_capacity(s.data().len());
        for &l in s.data() {
            let e = normal.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            data.push(intensity[&l] + e);
        }
        slices.push(Image2D::from_vec(*s.grid(), data)?);
    }
    ScalarVolume3D::new(*labels.grid(), labels.spacing()[2], labels.origin()[2], slices)
}

/// Pathology sections with their region labels and landmarks. Slice `i`
/// corresponds to MRI slice `mri_slice_indices[i]`.
#[derive(Clone, Debug)]
pub struct PathPhantom {
    pub stack: HistologyStack,
    pub labels: Vec<LabelMask2D>,
    pub landmarks: Vec<PointSet2D>,
    pub mri_slice_indices: Vec<usize>,
    /// Landmark twins at the unshifted MRI positions.
    pub mri_landmarks: BTreeMap<usize, PointSet2D>,
    pub background: [f64; 3],
    pub warnings: Vec<String>,
}

/// Sample the label field at each requested MRI slice position shifted by
/// `slice_offset_mm`, colour it and add per-channel Gaussian noise.
pub fn render_path_phantom(
    regions: &PhantomRegions,
    rgb: &BTreeMap<u16, [f64; 3]>,
    noise_sigma: f64,
    seed: u64,
    slice_offset_mm: f64,
) -> Result<PathPhantom> {
    let geom = &regions.geometry;
    for l in [BACKGROUND, PROSTATE, PERIPHERAL_ZONE, URETHRA, CANCER] {
        if regions.labels.voxels().any(|&v| v == l) {
            lookup(rgb, l)?;
        }
    }
    let background = lookup(rgb, BACKGROUND)?;
    let grid = geom.histology_grid()?;
    let normal = noise(noise_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (zlo, zhi) = geom.z_range();

    let mut out = PathPhantom {
        stack: HistologyStack {
            slices: Vec::new(),
            masks: Vec::new(),
        },
        labels: Vec::new(),
        landmarks: Vec::new(),
        mri_slice_indices: Vec::new(),
        mri_landmarks: BTreeMap::new(),
        background,
        warnings: Vec::new(),
    };
    for &k in &geom.histology_slices {
        let z = geom.z_of(k) + slice_offset_mm;
        if !(zlo..=zhi).contains(&z) {
            let msg = format!("MRI slice {k}: offset section at z = {z} mm lies outside the volume; dropped");
            warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        let labels = geom.label_slice(&grid, z);
        let mut data = Vec::with_capacity(grid.len());
        for &l in labels.data() {
            let mut c = lookup(rgb, l)?;
            if let Some(n) = &normal {
                for v in &mut c {
                    *v = (*v + n.sample(&mut rng)).clamp(0.0, 255.0);
                }
            }
            data.push(c);
        }
        let shifted = geom.landmarks_at(z);
        let reference = geom.landmarks_at(geom.z_of(k));
        let (h, m): (Vec<Landmark>, Vec<Landmark>) = shifted
            .into_iter()
            .filter_map(|l| reference.iter().find(|r| r.label == l.label).map(|r| (l, r.clone())))
            .unzip();
        if labels.foreground_count() == 0 {
            let msg = format!("MRI slice {k}: section at z = {z} mm misses the prostate; dropped");
            warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        out.stack.slices.push(RgbImage2D::new_rgb(grid, data)?);
        out.stack.masks.push(labels.foreground());
        out.labels.push(labels);
        out.landmarks.push(PointSet2D::new(h)?);
        out.mri_landmarks.insert(k, PointSet2D::new(m)?);
        out.mri_slice_indices.push(k);
    }
    if out.labels.is_empty() {
        return Err(Error::DegenerateRegion("no histology section intersects the prostate".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Degradations

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSpec {
    /// Each slice is rotated by a uniform angle in `[-r, r]` degrees.
    pub rotation_deg: f64,
    /// Isotropic shrinkage fraction `s`; slices are scaled by `1 - s`.
    pub shrink: f64,
    /// Translation bound per axis as a fraction of the image extent.
    pub translation_bound: f64,
    pub noise_sigma: f64,
    pub slice_offset_mm: f64,
    pub seed: u64,
    /// Translate even when `shrink == 0` (ablations only).
    pub decouple_translation: bool,
    /// Bound (mm) on the coefficients of a smooth random elastic warp;
    /// 0 disables it.
    pub elastic_mm: f64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            rotation_deg: 0.0,
            shrink: 0.0,
            translation_bound: 0.05,
            noise_sigma: 5.0,
            slice_offset_mm: 0.0,
            seed: 0,
            decouple_translation: false,
            elastic_mm: 0.0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.rotation_deg.is_finite() && self.rotation_deg >= 0.0) {
            return bad(format!("rotation bound {} must be >= 0", self.rotation_deg));
        }
        if !(0.0..1.0).contains(&self.shrink) {
            return bad(format!("shrink {} must be in [0, 1)", self.shrink));
        }
        if !(0.0..=0.2).contains(&self.translation_bound) {
            return bad(format!("translation bound {} must be in [0, 0.2]", self.translation_bound));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.elastic_mm.is_finite() && (0.0..=5.0).contains(&self.elastic_mm)) {
            return bad(format!("elastic amplitude {} must be in [0, 5] mm", self.elastic_mm));
        }
        if !self.slice_offset_mm.is_finite() {
            return bad("slice offset must be finite".into());
        }
        Ok(())
    }

    pub fn condition(&self) -> Condition {
        Condition {
            rotation_deg: self.rotation_deg,
            shrink: self.shrink,
            offset_mm: self.slice_offset_mm,
        }
    }
}

/// Draw streams derived from one seed.
mod stream {
    pub const MRI_NOISE: u64 = 1;
    pub const PATH_NOISE: u64 = 2;
    pub const DEGRADE: u64 = 3;
    pub const REPS: u64 = 4;
    pub const ELASTIC: u64 = 5;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    rng_for(seed, stream).next_u64()
}

/// Seed of repetition `rep`; depends only on the base seed so every
/// condition of a sweep sees the same noise and draws.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    let mut rng = rng_for(seed, stream::REPS);
    rng.set_word_pos(2 * rep as u128);
    rng.next_u64()
}

/// The applied per-slice degradation: `D = A ∘ V⁻¹` with the similarity
/// `A(p) = c + scale R(angle) (p - c) + t` and an optional smooth elastic
/// warp `V` acting in the original frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceDegradation {
    pub angle_deg: f64,
    pub scale: f64,
    pub translation_mm: [f64; 2],
    pub center_mm: Point2,
    pub elastic: Option<BSplineFFD2D>,
}

impl SliceDegradation {
    pub fn is_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.scale == 1.0 && self.translation_mm == [0.0, 0.0] && self.elastic.is_none()
    }

    /// The similarity part `A`.
    pub fn similarity(&self) -> AffineTransform2D {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let k = self.scale;
        AffineTransform2D::new([[k * c, -k * s], [k * s, k * c]], self.translation_mm, self.center_mm)
    }

    /// `D⁻¹ = V ∘ A⁻¹`: degraded histology point → original (= MRI) point.
    /// Resampling the original through it produces the degraded slide, so
    /// it is the ground truth the recovered chain should invert.
    pub fn pull(&self) -> Result<Transform2D> {
        let inv: Transform2D = self.similarity().inverse()?.into();
        match &self.elastic {
            None => Ok(inv),
            Some(v) => Transform2D::chain([inv, v.clone().into()]),
        }
    }

    /// `D(p)`: where an original point lands on the degraded slide.
    pub fn forward_point(&self, p: Point2) -> Result<Point2> {
        match &self.elastic {
            None => Ok(self.similarity().apply(p)),
            Some(_) => self.pull()?.invert_point(p),
        }
    }
}

fn elastic_warp(grid: &Grid2D, amplitude: f64, rng: &mut ChaCha8Rng) -> Result<BSplineFFD2D> {
    let ffd = BSplineFFD2D::covering(grid, ELASTIC_CELLS)?;
    let v: Vec<f64> = (0..ffd.parameters().len())
        .map(|_| amplitude * rng.random_range(-1.0..=1.0))
        .collect();
    ffd.with_parameters(&v)
}

/// Control cells per axis of the elastic warp: over a 64 mm field the
/// control spacing is 16 mm, so millimetre amplitudes stay diffeomorphic.
const ELASTIC_CELLS: usize = 4;

/// Rotate, shrink, translate and optionally warp every slice; images,
/// labels and landmarks see the same map. Returns the degraded phantom and
/// the per-slice degradations.
pub fn apply_degradations(path: &PathPhantom, spec: &DegradationSpec) -> Result<(PathPhantom, Vec<SliceDegradation>)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, stream::DEGRADE);
    let mut elastic_rng = rng_for(spec.seed, stream::ELASTIC);
    let mut out = path.clone();
    let mut applied = Vec::with_capacity(path.labels.len());
    for i in 0..path.labels.len() {
        // Always three draws per slice so conditions share their randomness.
        let u: [f64; 3] = [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ];
        let grid = path.labels[i].grid();
        let ext = grid.extent();
        let translate = spec.shrink > 0.0 || spec.decouple_translation;
        let t = if translate {
            [u[1] * spec.translation_bound * ext[0], u[2] * spec.translation_bound * ext[1]]
        } else {
            [0.0, 0.0]
        };
        let d = SliceDegradation {
            angle_deg: u[0] * spec.rotation_deg,
            scale: 1.0 - spec.shrink,
            translation_mm: t,
            center_mm: center_of_mass(&path.stack.masks[i], 1)?,
            elastic: (spec.elastic_mm > 0.0)
                .then(|| elastic_warp(grid, spec.elastic_mm, &mut elastic_rng))
                .transpose()?,
        };
        if !d.is_identity() {
            let pull = d.pull()?;
            out.stack.slices[i] =
                resample_rgb(&path.stack.slices[i], grid, &pull, Interpolation::Linear, path.background)?;
            out.labels[i] = resample_label(&path.labels[i], grid, &pull)?;
            out.stack.masks[i] = out.labels[i].foreground();
            let mut points = Vec::with_capacity(path.landmarks[i].len());
            for l in &path.landmarks[i].points {
                points.push(Landmark::new(l.label.clone(), d.forward_point(l.point())?));
            }
            out.landmarks[i] = PointSet2D::new(points)?;
            if out.stack.masks[i].foreground_count() == 0 {
                return Err(Error::DegenerateRegion(format!("slice {i} left the field of view")));
            }
        }
        applied.push(d);
    }
    Ok((out, applied))
}

// ---------------------------------------------------------------------------
// Cases

/// Everything a phantom experiment needs plus its known answer.
#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub inputs: CaseInputs,
    /// Per histology slice: the degradation that was applied.
    pub degradations: Vec<SliceDegradation>,
    pub spec: DegradationSpec,
    pub warnings: Vec<String>,
}

impl PhantomCase {
    /// Ground truth of histology slice `i`: degraded slide → MRI frame.
    pub fn ground_truth(&self, i: usize) -> Result<Transform2D> {
        self.degradations[i].pull()
    }

    /// Write the case in the manifest layout plus `ground_truth.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_case(&self.inputs, dir)?;
        #[derive(Serialize)]
        struct Entry<'a> {
            mri_slice_index: usize,
            degradation: &'a SliceDegradation,
            /// Degraded slide → MRI frame.
            ground_truth: Transform2D,
        }
        #[derive(Serialize)]
        struct Record<'a> {
            spec: &'a DegradationSpec,
            slices: Vec<Entry<'a>>,
            warnings: &'a [String],
        }
        let record = Record {
            spec: &self.spec,
            slices: self
                .degradations
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    Ok(Entry {
                        mri_slice_index: self.inputs.slices[i].mri_slice_index,
                        degradation: d,
                        ground_truth: self.ground_truth(i)?,
                    })
                })
                .collect::<Result<_>>()?,
            warnings: &self.warnings,
        };
        let path = dir.join("ground_truth.json");
        let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn generate_case(
    geom: &PhantomGeometry,
    appearance: &Appearance,
    spec: &DegradationSpec,
    case_id: &str,
) -> Result<PhantomCase> {
    spec.validate()?;
    let regions = synthesize_regions(geom)?;
    let t2 = render_mri_phantom(
        &regions,
        &appearance.mri_intensity,
        spec.noise_sigma,
        sub_seed(spec.seed, stream::MRI_NOISE),
    )?;
    let path = render_path_phantom(
        &regions,
        &appearance.pathology_rgb,
        spec.noise_sigma,
        sub_seed(spec.seed, stream::PATH_NOISE),
        spec.slice_offset_mm,
    )?;
    let (degraded, degradations) = apply_degradations(&path, spec)?;

    let labels = &regions.labels;
    let pick = |f: &dyn Fn(u16) -> bool| -> Result<LabelVolume3D> {
        LabelVolume3D::new(
            *labels.grid(),
            labels.spacing()[2],
            labels.origin()[2],
            labels.slices().iter().map(|s| s.map(|v| u16::from(f(v)))).collect(),
        )
    };
    let has_urethra = geom.urethra.is_some();
    let has_cancer = !geom.cancers.is_empty();
    let slices = (0..degraded.labels.len())
        .map(|i| HistologySlice {
            rgb: degraded.stack.slices[i].clone(),
            mask: degraded.stack.masks[i].clone(),
            cancer: has_cancer.then(|| degraded.labels[i].select(CANCER)),
            urethra: has_urethra.then(|| degraded.labels[i].select(URETHRA)),
            landmarks: Some(degraded.landmarks[i].clone()),
            mri_slice_index: degraded.mri_slice_indices[i],
            rotation_deg: 0.0,
            flip_lr: false,
        })
        .collect();
    let inputs = CaseInputs {
        case_id: case_id.to_string(),
        t2,
        prostate: pick(&|v| v != BACKGROUND)?,
        urethra: has_urethra.then(|| pick(&|v| v == URETHRA)).transpose()?,
        cancer: has_cancer.then(|| pick(&|v| v == CANCER)).transpose()?,
        mri_landmarks: degraded.mri_landmarks.clone(),
        slices,
    };
    inputs.validate()?;
    Ok(PhantomCase {
        inputs,
        degradations,
        spec: spec.clone(),
        warnings: degraded.warnings,
    })
}

// ---------------------------------------------------------------------------
// Conditions and sweeps

/// The swept degradation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub rotation_deg: f64,
    pub shrink: f64,
    pub offset_mm: f64,
}

impl Condition {
    pub fn label(&self) -> String {
        format!("r{}_s{}_o{}", self.rotation_deg, self.shrink, self.offset_mm)
    }

    pub fn spec(&self, base: &DegradationSpec) -> DegradationSpec {
        DegradationSpec {
            rotation_deg: self.rotation_deg,
            shrink: self.shrink,
            slice_offset_mm: self.offset_mm,
            ..base.clone()
        }
    }
}

/// Metrics of one repetition, keyed by name. `wall_time_s` is kept apart so
/// tables stay byte-identical between runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricStat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MetricStat { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionResult {
    pub condition: Condition,
    pub reps: Vec<RepOutcome>,
    pub stats: BTreeMap<String, MetricStat>,
    pub failed: usize,
}

impl ConditionResult {
    fn from_reps(condition: Condition, reps: Vec<RepOutcome>) -> Self {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in reps.iter().filter(|r| r.error.is_none()) {
            for (k, v) in &r.metrics {
                values.entry(k.clone()).or_default().push(*v);
            }
        }
        let failed = reps.iter().filter(|r| r.error.is_some()).count();
        if failed > 0 {
            values.insert("failed".into(), vec![1.0; failed]);
        }
        ConditionResult {
            condition,
            stats: values.iter().map(|(k, v)| (k.clone(), MetricStat::of(v))).collect(),
            reps,
            failed,
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.stats.get(metric).map(|s| s.mean)
    }

    /// Per-rep values of one metric over successful reps, in rep order.
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.reps.iter().filter_map(|r| r.metrics.get(metric).copied()).collect()
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Rotation angle (degrees) and isotropic scale of the local linear part
/// of `t` at `p`, by central differences.
fn local_similarity(t: &Transform2D, p: Point2) -> (f64, f64) {
    let h = 0.5;
    let d = |e: Point2| {
        let a = t.apply([p[0] + e[0], p[1] + e[1]]);
        let b = t.apply([p[0] - e[0], p[1] - e[1]]);
        [(a[0] - b[0]) / (2.0 * h), (a[1] - b[1]) / (2.0 * h)]
    };
    let (cx, cy) = (d([h, 0.0]), d([0.0, h]));
    let angle = (cx[1] - cy[0]).atan2(cx[0] + cy[1]).to_degrees();
    let scale = (cx[0] * cy[1] - cy[0] * cx[1]).abs().sqrt();
    (angle, scale)
}

fn wrap_deg(a: f64) -> f64 {
    (a + 180.0).rem_euclid(360.0) - 180.0
}

/// Registration accuracy against the phantom's known answer.
pub fn phantom_metrics(case: &PhantomCase, result: &CaseResult) -> Result<BTreeMap<String, f64>> {
    let report = evaluate_case(&case.inputs, result, HausdorffAggregation::Mean)?;
    let mut m = BTreeMap::new();
    m.insert("dice".to_string(), report.dice);
    let opt = [
        ("hausdorff_mm", report.hausdorff_mm),
        ("landmark_dev_mm", report.landmark_dev_mm),
        ("urethra_dev_mm", report.urethra_dev_mm),
    ];
    for (k, v) in opt {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    }
    let pairs: Vec<_> = result.outcomes.iter().filter_map(|o| o.result.as_ref()).collect();
    let stage = [
        ("dice_input", mean(pairs.iter().map(|r| r.dice_input))),
        ("dice_rigid", mean(pairs.iter().map(|r| r.dice_rigid))),
        ("dice_affine", mean(pairs.iter().filter_map(|r| r.dice_affine))),
        ("dice_final", mean(pairs.iter().map(|r| r.final_dice))),
        (
            "affine_scale",
            mean(pairs.iter().filter_map(|r| r.affine).map(|a| {
                let s = a.scales();
                (s[0] + s[1]) / 2.0
            })),
        ),
    ];
    for (k, v) in stage {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    }

    let mut residual = Vec::new();
    let mut rot_err = Vec::new();
    for o in &result.outcomes {
        let Some(chain) = &o.chain else { continue };
        let gt = case.ground_truth(o.histology_index)?;
        let reference = case.inputs.prostate.slice(o.mri_slice_index)?;
        let g = reference.grid();
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..g.height() {
            for x in 0..g.width() {
                if reference.get(x, y) != 0 {
                    let p = g.index_to_physical(x as f64, y as f64);
                    let q = gt.apply(chain.apply(p));
                    sum += (q[0] - p[0]).hypot(q[1] - p[1]);
                    n += 1;
                }
            }
        }
        if n > 0 {
            residual.push(sum / n as f64);
        }
        let c = center_of_mass(reference, 1)?;
        let (angle, _) = local_similarity(chain, c);
        rot_err.push(wrap_deg(angle - case.degradations[o.histology_index].angle_deg).abs());
    }
    if let Some(v) = mean(residual) {
        m.insert("chain_residual_mm".into(), v);
    }
    if let Some(v) = mean(rot_err) {
        m.insert("rotation_error_deg".into(), v);
    }
    Ok(m)
}

/// Generate, register and score one repetition.
pub fn run_rep(
    geom: &PhantomGeometry,
    appearance: &Appearance,
    spec: &DegradationSpec,
    profile: &RegistrationProfile,
    rep: usize,
) -> RepOutcome {
    let seed = rep_seed(spec.seed, rep);
    let t0 = Instant::now();
    let outcome = (|| -> Result<BTreeMap<String, f64>> {
        let rep_spec = DegradationSpec { seed, ..spec.clone() };
        let case = generate_case(geom, appearance, &rep_spec, &format!("{}_rep{rep}", spec.condition().label()))?;
        let (_, result) = run_case(&case.inputs, profile)?;
        if let Some(f) = result.failed_slices().first() {
            return Err(Error::SliceFailed {
                slice: f.histology_index,
                message: f.error.clone().unwrap_or_default(),
            });
        }
        phantom_metrics(&case, &result)
    })();
    let wall_time_s = t0.elapsed().as_secs_f64();
    match outcome {
        Ok(metrics) => RepOutcome {
            rep,
            seed,
            metrics,
            error: None,
            wall_time_s,
        },
        Err(e) => {
            warn!("{} rep {rep}: {e}", spec.condition().label());
            RepOutcome {
                rep,
                seed,
                metrics: BTreeMap::new(),
                error: Some(e.to_string()),
                wall_time_s,
            }
        }
    }
}

/// `reps` repetitions of one condition with distinct sub-seeds. Failed reps
/// are kept in the record, excluded from the statistics and counted.
pub fn run_condition(
    geom: &PhantomGeometry,
    appearance: &Appearance,
    spec: &DegradationSpec,
    profile: &RegistrationProfile,
    reps: usize,
) -> Result<ConditionResult> {
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be >= 1".into()));
    }
    spec.validate()?;
    geom.validate()?;
    let outcomes: Vec<RepOutcome> = (0..reps)
        .into_par_iter()
        .map(|rep| run_rep(geom, appearance, spec, profile, rep))
        .collect();
    Ok(ConditionResult::from_reps(spec.condition(), outcomes))
}

/// Axes of a Cartesian condition sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyGrid {
    pub rotations_deg: Vec<f64>,
    pub shrinks: Vec<f64>,
    pub offsets_mm: Vec<f64>,
    pub reps: usize,
}

impl Default for StudyGrid {
    fn default() -> Self {
        StudyGrid {
            rotations_deg: (0..=8).map(|i| 5.0 * i as f64).collect(),
            shrinks: (0..=6).map(|i| 0.05 * i as f64).collect(),
            offsets_mm: vec![0.0, 2.0],
            reps: 10,
        }
    }
}

impl StudyGrid {
    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        for &offset_mm in &self.offsets_mm {
            for &shrink in &self.shrinks {
                for &rotation_deg in &self.rotations_deg {
                    out.push(Condition {
                        rotation_deg,
                        shrink,
                        offset_mm,
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotations_deg.is_empty() || self.shrinks.is_empty() || self.offsets_mm.is_empty() {
            return Err(Error::InvalidArgument("study grid axes must be nonempty".into()));
        }
        if self.reps == 0 {
            return Err(Error::InvalidArgument("reps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Full study configuration, the JSON document the CLI reads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub geometry: PhantomGeometry,
    pub appearance: Appearance,
    /// Noise, translation bound, seed; also the single condition for
    /// `generate`.
    pub degradation: DegradationSpec,
    pub grid: StudyGrid,
    /// Profile overrides, see [`RegistrationProfile::with_overrides`].
    pub profile: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LongRow {
    pub condition: String,
    pub rep: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub condition: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyTable {
    pub conditions: Vec<ConditionResult>,
}

/// Every (condition, rep) pair of the grid, run in parallel.
pub fn run_study(
    geom: &PhantomGeometry,
    appearance: &Appearance,
    base: &DegradationSpec,
    grid: &StudyGrid,
    profile: &RegistrationProfile,
) -> Result<StudyTable> {
    grid.validate()?;
    geom.validate()?;
    let conditions = grid.conditions();
    for c in &conditions {
        c.spec(base).validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..conditions.len())
        .flat_map(|c| (0..grid.reps).map(move |r| (c, r)))
        .collect();
    info!("phantom study: {} conditions x {} reps", conditions.len(), grid.reps);
    let outcomes: Vec<RepOutcome> = jobs
        .par_iter()
        .map(|&(c, r)| run_rep(geom, appearance, &conditions[c].spec(base), profile, r))
        .collect();
    let mut it = outcomes.into_iter();
    let results = conditions
        .iter()
        .map(|c| ConditionResult::from_reps(*c, it.by_ref().take(grid.reps).collect()))
        .collect();
    Ok(StudyTable { conditions: results })
}

impl StudyTable {
    pub fn long_rows(&self) -> Vec<LongRow> {
        let mut rows = Vec::new();
        for c in &self.conditions {
            let label = c.condition.label();
            for r in &c.reps {
                if r.error.is_some() {
                    rows.push(LongRow {
                        condition: label.clone(),
                        rep: r.rep,
                        metric: "failed".into(),
                        value: 1.0,
                    });
                    continue;
                }
                for (k, v) in &r.metrics {
                    rows.push(LongRow {
                        condition: label.clone(),
                        rep: r.rep,
                        metric: k.clone(),
                        value: *v,
                    });
                }
            }
        }
        rows
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.conditions
            .iter()
            .flat_map(|c| {
                c.stats.iter().map(|(k, s)| SummaryRow {
                    condition: c.condition.label(),
                    metric: k.clone(),
                    mean: s.mean,
                    std: s.std,
                })
            })
            .collect()
    }

    /// `study_long.csv`, `study_summary.csv` and, when asked, one
    /// `curves_<metric>_vs_<axis>.svg` per headline metric and swept axis.
    pub fn write(&self, dir: impl AsRef<Path>, curves: bool) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let long = dir.join("study_long.csv");
        let mut w = csv::Writer::from_path(&long)?;
        for r in self.long_rows() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&long, e))?;
        written.push(long);
        let summary = dir.join("study_summary.csv");
        let mut w = csv::Writer::from_path(&summary)?;
        for r in self.summary_rows() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&summary, e))?;
        written.push(summary);
        if curves {
            for metric in ["dice", "hausdorff_mm", "urethra_dev_mm", "landmark_dev_mm"] {
                for axis in [Axis::Rotation, Axis::Shrink] {
                    if let Some(svg) = self.curves_svg(metric, axis) {
                        let path = dir.join(format!("curves_{metric}_vs_{}.svg", axis.name()));
                        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
                        written.push(path);
                    }
                }
            }
        }
        Ok(written)
    }

    /// Mean ± std of `metric` against one swept axis, one line per setting
    /// of the other axes. `None` when the axis was not swept.
    pub fn curves_svg(&self, metric: &str, axis: Axis) -> Option<String> {
        let mut series: BTreeMap<String, Vec<(f64, MetricStat)>> = BTreeMap::new();
        for c in &self.conditions {
            let Some(s) = c.stats.get(metric) else { continue };
            let k = &c.condition;
            let (x, name) = match axis {
                Axis::Rotation => (k.rotation_deg, format!("s = {}%, offset {} mm", k.shrink * 100.0, k.offset_mm)),
                Axis::Shrink => (k.shrink * 100.0, format!("r = {}°, offset {} mm", k.rotation_deg, k.offset_mm)),
            };
            series.entry(name).or_default().push((x, *s));
        }
        if series.values().all(|v| v.len() < 2) {
            return None;
        }
        for v in series.values_mut() {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        Some(line_plot_svg(metric, axis.title(), &series))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rotation,
    Shrink,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Rotation => "rotation",
            Axis::Shrink => "shrink",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Axis::Rotation => "rotation bound (deg)",
            Axis::Shrink => "shrinkage (%)",
        }
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn line_plot_svg(title: &str, x_title: &str, series: &BTreeMap<String, Vec<(f64, MetricStat)>>) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 70.0, 220.0, 40.0, 50.0);
    let pts = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, s) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(s.mean - s.std);
        y1 = y1.max(s.mean + s.std);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" font-size="15">{title}</text>"#, left);
    let (bx, by) = (h - bottom, w - right);
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} L{left},{bx} L{by},{bx}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            py(yv) + 4.0,
            yv
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{:.1}</text>"#,
            px(xv),
            bx + 16.0,
            xv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_title}</text>"#,
        px((x0 + x1) / 2.0),
        h - 12.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = pts.iter().map(|(x, m)| format!("{:.2},{:.2}", px(*x), py(m.mean + m.std))).collect();
        let lower: Vec<String> =
            pts.iter().rev().map(|(x, m)| format!("{:.2},{:.2}", px(*x), py(m.mean - m.std))).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts.iter().map(|(x, m)| format!("{:.2},{:.2}", px(*x), py(m.mean))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            by + 10.0,
            by + 30.0,
            by + 36.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
