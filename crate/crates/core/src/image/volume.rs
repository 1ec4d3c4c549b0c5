use super::{Grid2D, Image2D, LabelMask2D, RgbImage2D};
use crate::{Error, Result};

/// Stack of 2D slices sharing one in-plane grid, evenly spaced along z.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D<T> {
    grid: Grid2D,
    z_spacing: f64,
    z_origin: f64,
    slices: Vec<Image2D<T>>,
}

pub type ScalarVolume3D = Volume3D<f64>;
pub type LabelVolume3D = Volume3D<u16>;
pub type RgbVolume3D = Volume3D<[f64; 3]>;

impl<T: Copy> Volume3D<T> {
    pub fn new(
        grid: Grid2D,
        z_spacing: f64,
        z_origin: f64,
        slices: Vec<Image2D<T>>,
    ) -> Result<Self> {
        if !(z_spacing > 0.0) || !z_spacing.is_finite() {
            return Err(Error::InvalidGrid(format!("z spacing {z_spacing} must be > 0")));
        }
        if slices.is_empty() {
            return Err(Error::InvalidGrid("volume needs at least one slice".into()));
        }
        for (k, s) in slices.iter().enumerate() {
            grid.ensure_same(s.grid(), &format!("slice {k}"))?;
        }
        Ok(Self {
            grid,
            z_spacing,
            z_origin,
            slices,
        })
    }

    pub fn filled(grid: Grid2D, z_spacing: f64, z_origin: f64, depth: usize, value: T) -> Result<Self> {
        Self::new(
            grid,
            z_spacing,
            z_origin,
            (0..depth).map(|_| Image2D::filled(grid, value)).collect(),
        )
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    /// `[K, L, M]` voxel counts.
    pub fn size(&self) -> [usize; 3] {
        [self.grid.width(), self.grid.height(), self.slices.len()]
    }

    pub fn spacing(&self) -> [f64; 3] {
        let s = self.grid.spacing();
        [s[0], s[1], self.z_spacing]
    }

    pub fn origin(&self) -> [f64; 3] {
        let o = self.grid.origin();
        [o[0], o[1], self.z_origin]
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, k: usize) -> Result<&Image2D<T>> {
        self.slices.get(k).ok_or(Error::SliceIndexOutOfRange {
            index: k,
            count: self.slices.len(),
        })
    }

    pub fn slices(&self) -> &[Image2D<T>] {
        &self.slices
    }

    pub fn z_of(&self, k: usize) -> f64 {
        self.z_origin + k as f64 * self.z_spacing
    }

    pub fn set_slice(&mut self, k: usize, image: Image2D<T>) -> Result<()> {
        self.grid.ensure_same(image.grid(), "replacement slice")?;
        let count = self.slices.len();
        let slot = self
            .slices
            .get_mut(k)
            .ok_or(Error::SliceIndexOutOfRange { index: k, count })?;
        *slot = image;
        Ok(())
    }

    /// Values in x-fastest, then y, then z order.
    pub fn voxels(&self) -> impl Iterator<Item = &T> {
        self.slices.iter().flat_map(|s| s.data().iter())
    }
}

/// Serial histology sections with their prostate masks.
#[derive(Clone, Debug)]
pub struct HistologyStack {
    pub slices: Vec<RgbImage2D>,
    pub masks: Vec<LabelMask2D>,
}

impl HistologyStack {
    pub fn new(slices: Vec<RgbImage2D>, masks: Vec<LabelMask2D>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::InvalidArgument("histology stack is empty".into()));
        }
        if slices.len() != masks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} slices but {} masks",
                slices.len(),
                masks.len()
            )));
        }
        for (i, (s, m)) in slices.iter().zip(&masks).enumerate() {
            s.grid().ensure_same(m.grid(), &format!("histology slice {i}"))?;
        }
        Ok(Self { slices, masks })
    }

    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }
}
