use super::{Grid2D, Image2D, LabelMask2D, ScalarImage2D};
use crate::{Error, Result};

/// Normalised 1D Gaussian kernel truncated at `4 sigma`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur, sigma in pixels, reflected boundary.
pub fn gaussian_blur(image: &ScalarImage2D, sigma: f64) -> ScalarImage2D {
    if sigma <= 0.0 {
        return image.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (image.width(), image.height());
    let src = image.data();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let yy = reflect(y as isize + j as isize - r, h);
            let src_row = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    Image2D::from_vec(*image.grid(), out).expect("same grid")
}

fn shrunk_grid(grid: &Grid2D, factor: usize) -> Result<Grid2D> {
    if factor == 0 || factor > grid.width() || factor > grid.height() {
        return Err(Error::ShrinkTooLarge {
            factor,
            width: grid.width(),
            height: grid.height(),
        });
    }
    let s = grid.spacing();
    let shift = (factor as f64 - 1.0) / 2.0;
    Grid2D::new(
        grid.width() / factor,
        grid.height() / factor,
        [s[0] * factor as f64, s[1] * factor as f64],
        grid.index_to_physical(shift, shift),
    )
}

/// Subsample by an integer factor, taking the value at each block centre.
pub fn shrink_image(image: &ScalarImage2D, factor: usize) -> Result<ScalarImage2D> {
    let grid = shrunk_grid(image.grid(), factor)?;
    if factor == 1 {
        return Ok(image.clone());
    }
    let (w, h) = (image.width(), image.height());
    let shift = (factor as f64 - 1.0) / 2.0;
    let src = image.data();
    Ok(ScalarImage2D::from_fn(grid, |x, y| {
        let fx = (x * factor) as f64 + shift;
        let fy = (y * factor) as f64 + shift;
        super::sample_linear(src, w, h, fx, fy, 0.0)
    }))
}

/// Nearest-neighbour subsampling of a mask at block centres.
pub fn shrink_mask(mask: &LabelMask2D, factor: usize) -> Result<LabelMask2D> {
    let grid = shrunk_grid(mask.grid(), factor)?;
    let half = factor / 2;
    Ok(LabelMask2D::from_fn(grid, |x, y| {
        mask.get(x * factor + half, y * factor + half)
    }))
}

/// Multi-resolution pyramid: level `i` is the input blurred by `sigmas[i]`
/// pixels and then subsampled by `shrink_factors[i]`.
pub fn build_pyramid(
    image: &ScalarImage2D,
    shrink_factors: &[usize],
    sigmas: &[f64],
) -> Result<Vec<ScalarImage2D>> {
    if shrink_factors.len() != sigmas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} shrink factors but {} sigmas",
            shrink_factors.len(),
            sigmas.len()
        )));
    }
    if let Some(&f) = shrink_factors.iter().find(|&&f| f == 0) {
        return Err(Error::InvalidArgument(format!("shrink factor {f} < 1")));
    }
    shrink_factors
        .iter()
        .zip(sigmas)
        .map(|(&f, &s)| {
            shrunk_grid(image.grid(), f)?;
            shrink_image(&gaussian_blur(image, s), f)
        })
        .collect()
}
