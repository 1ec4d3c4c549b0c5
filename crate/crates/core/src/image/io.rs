//! File formats: NIfTI-1 volumes, PNG/TIFF slices, landmark JSON.

use std::path::Path;

use ndarray::{Array3, ArrayD, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{Grid2D, Image2D, LabelMask2D, LabelVolume3D, PointSet2D, RgbImage2D, ScalarVolume3D, Volume3D};
use crate::{Error, Result};

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn ensure_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

/// Shortest decimal reading of a header `f32`, so 0.4 stays 0.4 instead of
/// 0.4000000059604645.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

fn read_nifti(path: &Path) -> Result<(Grid2D, f64, f64, Array3<f64>)> {
    ensure_exists(path)?;
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let data: ArrayD<f64> = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| nifti_err(path, e))?;
    let shape = data.shape().to_vec();
    let data = match shape.len() {
        2 => data
            .into_shape_with_order((shape[0], shape[1], 1))
            .map_err(|e| nifti_err(path, e))?,
        3 => data.into_dimensionality::<Ix3>().map_err(|e| nifti_err(path, e))?,
        n if n > 3 && shape[3..].iter().all(|&d| d == 1) => data
            .into_shape_with_order((shape[0], shape[1], shape[2]))
            .map_err(|e| nifti_err(path, e))?,
        n => return Err(nifti_err(path, format!("expected a 3D volume, got {n} dimensions"))),
    };
    let pix = header.pixdim;
    let spacing = [widen(pix[1].abs()), widen(pix[2].abs()), widen(pix[3].abs())];
    let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    let origin = if header.sform_code > 0 {
        [header.srow_x[3], header.srow_y[3], header.srow_z[3]].map(widen)
    } else if header.qform_code > 0 {
        [header.quatern_x, header.quatern_y, header.quatern_z].map(widen)
    } else {
        [0.0; 3]
    };
    let (k, l, _) = data.dim();
    let grid = Grid2D::new(k, l, [spacing[0], spacing[1]], [origin[0], origin[1]])?;
    Ok((grid, spacing[2], origin[2], data))
}

fn volume_from_array<T: Copy>(
    grid: Grid2D,
    zs: f64,
    zo: f64,
    data: &Array3<f64>,
    convert: impl Fn(f64) -> T,
) -> Result<Volume3D<T>> {
    let (k, l, m) = data.dim();
    let slices = (0..m)
        .map(|z| Image2D::from_fn(grid, |x, y| convert(data[[x, y, z]])))
        .collect();
    debug_assert_eq!((k, l), (grid.width(), grid.height()));
    Volume3D::new(grid, zs, zo, slices)
}

/// Read a scalar NIfTI volume; spacing and origin come from the header.
pub fn read_scalar_volume(path: impl AsRef<Path>) -> Result<ScalarVolume3D> {
    let path = path.as_ref();
    let (grid, zs, zo, data) = read_nifti(path)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(nifti_err(path, "non-finite voxel values"));
    }
    volume_from_array(grid, zs, zo, &data, |v| v)
}

/// Read a label NIfTI volume (values rounded to non-negative integers).
pub fn read_label_volume(path: impl AsRef<Path>) -> Result<LabelVolume3D> {
    let path = path.as_ref();
    let (grid, zs, zo, data) = read_nifti(path)?;
    if data.iter().any(|v| !v.is_finite() || *v < -0.5 || *v > u16::MAX as f64) {
        return Err(nifti_err(path, "label values must be non-negative integers"));
    }
    volume_from_array(grid, zs, zo, &data, |v| v.round() as u16)
}

fn header_for<T: Copy>(volume: &Volume3D<T>) -> NiftiHeader {
    let sp = volume.spacing();
    let o = volume.origin();
    let mut h = NiftiHeader {
        pixdim: [1.0, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0],
        xyzt_units: 2,
        qform_code: 1,
        sform_code: 1,
        quatern_b: 0.0,
        quatern_c: 0.0,
        quatern_d: 0.0,
        quatern_x: o[0] as f32,
        quatern_y: o[1] as f32,
        quatern_z: o[2] as f32,
        srow_x: [sp[0] as f32, 0.0, 0.0, o[0] as f32],
        srow_y: [0.0, sp[1] as f32, 0.0, o[1] as f32],
        srow_z: [0.0, 0.0, sp[2] as f32, o[2] as f32],
        ..NiftiHeader::default()
    };
    h.pixdim[0] = 1.0;
    h
}

fn to_array<T: Copy, U>(volume: &Volume3D<T>, f: impl Fn(T) -> U) -> Array3<U> {
    let [k, l, m] = volume.size();
    Array3::from_shape_fn((k, l, m), |(x, y, z)| f(volume.slices()[z].get(x, y)))
}

/// Write a scalar volume as float32 NIfTI (`.nii` or `.nii.gz`).
pub fn write_scalar_volume(path: impl AsRef<Path>, volume: &ScalarVolume3D) -> Result<()> {
    let path = path.as_ref();
    let header = header_for(volume);
    let data = to_array(volume, |v| v as f32);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| nifti_err(path, e))
}

/// Write a label volume as uint16 NIfTI.
pub fn write_label_volume(path: impl AsRef<Path>, volume: &LabelVolume3D) -> Result<()> {
    let path = path.as_ref();
    let header = header_for(volume);
    let data = to_array(volume, |v| v);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| nifti_err(path, e))
}

/// Write an RGB volume as RGB24 NIfTI; channels are rounded and clamped.
pub fn write_rgb_volume(path: impl AsRef<Path>, volume: &Volume3D<[f64; 3]>) -> Result<()> {
    let path = path.as_ref();
    let header = header_for(volume);
    let data = to_array(volume, |v| v.map(|c| c.round().clamp(0.0, 255.0) as u8));
    WriterOptions::new(path)
        .reference_header(&header)
        .write_rgb_nifti(&data)
        .map_err(|e| nifti_err(path, e))
}

fn codec_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Read a PNG/TIFF colour slice. Spacing and origin are supplied by the caller
/// because these formats carry no physical geometry.
pub fn read_rgb_image(path: impl AsRef<Path>, spacing: [f64; 2], origin: [f64; 2]) -> Result<RgbImage2D> {
    let path = path.as_ref();
    ensure_exists(path)?;
    let img = image::open(path).map_err(|e| codec_err(path, e))?.to_rgb8();
    let grid = Grid2D::new(img.width() as usize, img.height() as usize, spacing, origin)?;
    let data = img
        .pixels()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    Image2D::from_vec(grid, data)
}

/// Read a PNG/TIFF label image (8- or 16-bit grey values are taken verbatim).
pub fn read_label_image(path: impl AsRef<Path>, spacing: [f64; 2], origin: [f64; 2]) -> Result<LabelMask2D> {
    let path = path.as_ref();
    ensure_exists(path)?;
    let img = image::open(path).map_err(|e| codec_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u16> = match img {
        image::DynamicImage::ImageLuma16(g) => g.into_raw(),
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u16::from).collect(),
        other => other.to_luma8().into_raw().into_iter().map(u16::from).collect(),
    };
    Image2D::from_vec(Grid2D::new(w, h, spacing, origin)?, data)
}

pub fn write_rgb_image(path: impl AsRef<Path>, image: &RgbImage2D) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|v| v.map(|c| c.round().clamp(0.0, 255.0) as u8))
        .collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, raw)
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| codec_err(path, e))
}

/// Write labels as 8-bit grey when they fit, 16-bit otherwise.
pub fn write_label_image(path: impl AsRef<Path>, mask: &LabelMask2D) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (mask.width() as u32, mask.height() as u32);
    if mask.data().iter().all(|&v| v <= 255) {
        let raw = mask.data().iter().map(|&v| v as u8).collect();
        image::GrayImage::from_raw(w, h, raw)
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(|e| codec_err(path, e))
    } else {
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(w, h, mask.data().to_vec()).expect("buffer matches dimensions");
        buf.save(path).map_err(|e| codec_err(path, e))
    }
}

/// Read a landmark file: a JSON list of `{label, x_mm, y_mm}`.
pub fn read_landmarks(path: impl AsRef<Path>) -> Result<PointSet2D> {
    let path = path.as_ref();
    ensure_exists(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: PointSet2D = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    PointSet2D::new(set.points)
}

pub fn write_landmarks(path: impl AsRef<Path>, points: &PointSet2D) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(points).expect("landmarks serialise");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
