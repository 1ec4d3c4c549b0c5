//! Geometry-aware 2D/3D image containers.
//!
//! Physical coordinates follow the pixel-centre convention: pixel `(i, j)`
//! sits at `origin + (i, j) * spacing` millimetres. Orientation is always
//! axis aligned; flips are explicit transforms.

mod io;
mod pyramid;
mod resample;
mod volume;

pub use io::{
    read_label_image, read_label_volume, read_landmarks, read_rgb_image, read_scalar_volume,
    write_label_image, write_label_volume, write_landmarks, write_rgb_image, write_rgb_volume,
    write_scalar_volume,
};
pub use pyramid::{build_pyramid, gaussian_blur, gaussian_kernel, shrink_image, shrink_mask};
pub use resample::{
    resample_label, resample_rgb, resample_scalar, sample_linear, sample_nearest, Interpolation,
};
pub use volume::{HistologyStack, LabelVolume3D, RgbVolume3D, ScalarVolume3D, Volume3D};

use serde::{Deserialize, Serialize};

use crate::{Error, Point2, Result};

/// Regular axis-aligned 2D sampling grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    width: usize,
    height: usize,
    spacing: [f64; 2],
    origin: [f64; 2],
}

impl Grid2D {
    pub fn new(width: usize, height: usize, spacing: [f64; 2], origin: [f64; 2]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidGrid(format!(
                "size must be at least 1x1, got {width}x{height}"
            )));
        }
        if !(spacing[0] > 0.0 && spacing[1] > 0.0) || !spacing.iter().all(|s| s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite origin {origin:?}")));
        }
        Ok(Self {
            width,
            height,
            spacing,
            origin,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical size covered by the pixels (edge to edge).
    pub fn extent(&self) -> [f64; 2] {
        [
            self.width as f64 * self.spacing[0],
            self.height as f64 * self.spacing[1],
        ]
    }

    /// Physical position of the lower pixel edge.
    pub fn lower_edge(&self) -> Point2 {
        [
            self.origin[0] - 0.5 * self.spacing[0],
            self.origin[1] - 0.5 * self.spacing[1],
        ]
    }

    /// Physical centre of the covered area.
    pub fn center(&self) -> Point2 {
        let lo = self.lower_edge();
        let ext = self.extent();
        [lo[0] + 0.5 * ext[0], lo[1] + 0.5 * ext[1]]
    }

    #[inline]
    pub fn index_to_physical(&self, ix: f64, iy: f64) -> Point2 {
        [
            self.origin[0] + ix * self.spacing[0],
            self.origin[1] + iy * self.spacing[1],
        ]
    }

    #[inline]
    pub fn physical_to_index(&self, p: Point2) -> [f64; 2] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
        ]
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Grid covering the same edge-to-edge extent at a new spacing.
    ///
    /// The pixel count is rounded to the nearest integer (at least one), and
    /// the first pixel centre is placed half a new pixel inside the lower edge.
    pub fn resampled(&self, spacing: [f64; 2]) -> Result<Grid2D> {
        let ext = self.extent();
        let w = ((ext[0] / spacing[0]).round() as usize).max(1);
        let h = ((ext[1] / spacing[1]).round() as usize).max(1);
        let lo = self.lower_edge();
        Grid2D::new(
            w,
            h,
            spacing,
            [lo[0] + 0.5 * spacing[0], lo[1] + 0.5 * spacing[1]],
        )
    }

    /// Check that two grids describe the same sampling, within floating-point noise.
    pub fn same_as(&self, other: &Grid2D) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        self.width == other.width
            && self.height == other.height
            && close(self.spacing[0], other.spacing[0])
            && close(self.spacing[1], other.spacing[1])
            && close(self.origin[0], other.origin[0])
            && close(self.origin[1], other.origin[1])
    }

    pub(crate) fn ensure_same(&self, other: &Grid2D, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {}x{} @ {:?} vs {}x{} @ {:?}",
                self.width, self.height, self.spacing, other.width, other.height, other.spacing
            )))
        }
    }
}

/// Pixel buffer on a [`Grid2D`], stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D<T> {
    grid: Grid2D,
    data: Vec<T>,
}

pub type ScalarImage2D = Image2D<f64>;
pub type RgbImage2D = Image2D<[f64; 3]>;
pub type LabelMask2D = Image2D<u16>;

impl<T: Copy> Image2D<T> {
    pub fn from_vec(grid: Grid2D, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidImage(format!(
                "{} values for a {}x{} grid",
                data.len(),
                grid.width(),
                grid.height()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid2D, value: T) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid2D, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for y in 0..grid.height() {
            for x in 0..grid.width() {
                data.push(f(x, y));
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.grid.width + x]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Image2D<U> {
        Image2D {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same pixels, relabelled onto a grid of identical size.
    pub fn with_grid(&self, grid: Grid2D) -> Result<Self> {
        Self::from_vec(grid, self.data.clone())
    }
}

impl ScalarImage2D {
    /// Construct a scalar image, rejecting non-finite intensities.
    pub fn new(grid: Grid2D, data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite intensity at {i}")));
        }
        Self::from_vec(grid, data)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Zero every pixel where `mask` is background.
    pub fn masked(&self, mask: &LabelMask2D) -> Result<ScalarImage2D> {
        self.grid.ensure_same(mask.grid(), "masking")?;
        let data = self
            .data
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m > 0 { v } else { 0.0 })
            .collect();
        Ok(Image2D {
            grid: self.grid,
            data,
        })
    }
}

impl RgbImage2D {
    pub fn new_rgb(grid: Grid2D, data: Vec<[f64; 3]>) -> Result<Self> {
        if data
            .iter()
            .flatten()
            .any(|c| !c.is_finite() || *c < 0.0 || *c > 255.0)
        {
            return Err(Error::InvalidImage(
                "RGB channels must lie in [0, 255]".into(),
            ));
        }
        Self::from_vec(grid, data)
    }

    pub fn masked(&self, mask: &LabelMask2D) -> Result<RgbImage2D> {
        self.grid.ensure_same(mask.grid(), "masking")?;
        let data = self
            .data
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m > 0 { v } else { [0.0; 3] })
            .collect();
        Ok(Image2D {
            grid: self.grid,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> ScalarImage2D {
        self.map(|v| v[c])
    }
}

/// Luma conversion `0.299 R + 0.587 G + 0.114 B`, unrounded.
pub fn rgb_to_gray(image: &RgbImage2D) -> ScalarImage2D {
    image.map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
}

impl LabelMask2D {
    /// Sorted set of labels present, background included if present.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.clone();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0).count()
    }

    /// Binary mask (1 where the pixel carries `label`).
    pub fn select(&self, label: u16) -> LabelMask2D {
        self.map(|v| u16::from(v == label))
    }

    /// Binary mask of every non-background pixel.
    pub fn foreground(&self) -> LabelMask2D {
        self.map(|v| u16::from(v > 0))
    }

    /// 0/1 indicator image of non-background pixels.
    pub fn indicator(&self) -> ScalarImage2D {
        self.map(|v| if v > 0 { 1.0 } else { 0.0 })
    }

    /// Binary union with another mask on the same grid.
    pub fn union(&self, other: &LabelMask2D) -> Result<LabelMask2D> {
        self.grid.ensure_same(other.grid(), "mask union")?;
        let data = self
            .data
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| u16::from(a > 0 || b > 0))
            .collect();
        Ok(Image2D {
            grid: self.grid,
            data,
        })
    }

    /// Binary dilation of the foreground by a square structuring element.
    pub fn dilate(&self, radius: usize) -> LabelMask2D {
        if radius == 0 {
            return self.foreground();
        }
        let (w, h) = (self.width(), self.height());
        // separable max filter: rows then columns
        let mut rows = vec![0u16; w * h];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                rows[y * w + x] = u16::from((lo..=hi).any(|xx| self.data[y * w + xx] > 0));
            }
        }
        let mut out = vec![0u16; w * h];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                out[y * w + x] = u16::from((lo..=hi).any(|yy| rows[yy * w + x] > 0));
            }
        }
        Image2D {
            grid: self.grid,
            data: out,
        }
    }
}

/// Mean physical coordinate of all pixels carrying `label`.
pub fn center_of_mass(mask: &LabelMask2D, label: u16) -> Result<Point2> {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) == label {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion(format!("label {label} absent from mask")));
    }
    Ok(mask
        .grid()
        .index_to_physical(sx / n as f64, sy / n as f64))
}

/// Centre of mass of every non-background pixel.
pub fn foreground_center(mask: &LabelMask2D) -> Result<Point2> {
    center_of_mass(&mask.foreground(), 1)
}

/// A named landmark in physical millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub label: String,
    pub x_mm: f64,
    pub y_mm: f64,
}

impl Landmark {
    pub fn new(label: impl Into<String>, p: Point2) -> Self {
        Self {
            label: label.into(),
            x_mm: p[0],
            y_mm: p[1],
        }
    }

    pub fn point(&self) -> Point2 {
        [self.x_mm, self.y_mm]
    }
}

/// Landmarks of one slice.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointSet2D {
    pub points: Vec<Landmark>,
}

impl PointSet2D {
    pub fn new(points: Vec<Landmark>) -> Result<Self> {
        if points.iter().any(|p| !p.x_mm.is_finite() || !p.y_mm.is_finite()) {
            return Err(Error::InvalidArgument(
                "landmark coordinates must be finite".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&Landmark> {
        self.points.iter().find(|p| p.label == label)
    }

    pub fn map_points(&self, mut f: impl FnMut(Point2) -> Point2) -> PointSet2D {
        PointSet2D {
            points: self
                .points
                .iter()
                .map(|l| Landmark::new(l.label.clone(), f(l.point())))
                .collect(),
        }
    }
}
