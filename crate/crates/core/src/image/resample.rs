use super::{Grid2D, Image2D, LabelMask2D, RgbImage2D, ScalarImage2D};
use crate::transform::Transform2D;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Linear,
}

#[inline]
fn inside(fx: f64, fy: f64, w: usize, h: usize) -> bool {
    fx >= -0.5 && fy >= -0.5 && fx < w as f64 - 0.5 && fy < h as f64 - 0.5
}

/// Bilinear sample at continuous index `(fx, fy)`.
///
/// Positions within half a pixel of the border are clamped onto the edge
/// pixels; anything further out returns `fill`.
#[inline]
pub fn sample_linear(data: &[f64], w: usize, h: usize, fx: f64, fy: f64, fill: f64) -> f64 {
    if !inside(fx, fy, w, h) {
        return fill;
    }
    let cx = fx.clamp(0.0, (w - 1) as f64);
    let cy = fy.clamp(0.0, (h - 1) as f64);
    let x0 = (cx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (cy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = cx - x0 as f64;
    let ty = cy - y0 as f64;
    let v00 = data[y0 * w + x0];
    let v10 = data[y0 * w + x1];
    let v01 = data[y1 * w + x0];
    let v11 = data[y1 * w + x1];
    let top = v00 * (1.0 - tx) + v10 * tx;
    let bottom = v01 * (1.0 - tx) + v11 * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Nearest-neighbour lookup; `None` outside the image.
#[inline]
pub fn sample_nearest(w: usize, h: usize, fx: f64, fy: f64) -> Option<usize> {
    if !inside(fx, fy, w, h) {
        return None;
    }
    let x = (fx.round().max(0.0) as usize).min(w - 1);
    let y = (fy.round().max(0.0) as usize).min(h - 1);
    Some(y * w + x)
}

fn check_transform(transform: &Transform2D) -> Result<()> {
    if transform.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteTransform)
    }
}

/// Visit every target pixel with its continuous source index.
fn for_each_source_index(
    source: &Grid2D,
    target: &Grid2D,
    transform: &Transform2D,
    mut f: impl FnMut(usize, f64, f64),
) {
    let mut k = 0;
    for y in 0..target.height() {
        for x in 0..target.width() {
            let p = target.index_to_physical(x as f64, y as f64);
            let q = transform.apply(p);
            let [fx, fy] = source.physical_to_index(q);
            f(k, fx, fy);
            k += 1;
        }
    }
}

/// Resample `image` onto `target`; `transform` maps target physical points
/// into source physical points.
pub fn resample_scalar(
    image: &ScalarImage2D,
    target: &Grid2D,
    transform: &Transform2D,
    interp: Interpolation,
    fill: f64,
) -> Result<ScalarImage2D> {
    check_transform(transform)?;
    let (w, h) = (image.width(), image.height());
    let src = image.data();
    let mut out = vec![fill; target.len()];
    for_each_source_index(image.grid(), target, transform, |k, fx, fy| {
        out[k] = match interp {
            Interpolation::Linear => sample_linear(src, w, h, fx, fy, fill),
            Interpolation::Nearest => sample_nearest(w, h, fx, fy).map_or(fill, |i| src[i]),
        };
    });
    Image2D::from_vec(*target, out)
}

/// Nearest-neighbour label resampling; pixels mapping outside become background.
pub fn resample_label(
    mask: &LabelMask2D,
    target: &Grid2D,
    transform: &Transform2D,
) -> Result<LabelMask2D> {
    check_transform(transform)?;
    let (w, h) = (mask.width(), mask.height());
    let src = mask.data();
    let mut out = vec![0u16; target.len()];
    for_each_source_index(mask.grid(), target, transform, |k, fx, fy| {
        out[k] = sample_nearest(w, h, fx, fy).map_or(0, |i| src[i]);
    });
    Image2D::from_vec(*target, out)
}

/// Per-channel resampling of an RGB image.
pub fn resample_rgb(
    image: &RgbImage2D,
    target: &Grid2D,
    transform: &Transform2D,
    interp: Interpolation,
    fill: [f64; 3],
) -> Result<RgbImage2D> {
    check_transform(transform)?;
    let (w, h) = (image.width(), image.height());
    let channels: Vec<Vec<f64>> = (0..3).map(|c| image.channel(c).into_data()).collect();
    let src = image.data();
    let mut out = vec![fill; target.len()];
    for_each_source_index(image.grid(), target, transform, |k, fx, fy| {
        out[k] = match interp {
            Interpolation::Linear => [
                sample_linear(&channels[0], w, h, fx, fy, fill[0]),
                sample_linear(&channels[1], w, h, fx, fy, fill[1]),
                sample_linear(&channels[2], w, h, fx, fy, fill[2]),
            ],
            Interpolation::Nearest => sample_nearest(w, h, fx, fy).map_or(fill, |i| src[i]),
        };
    });
    Image2D::from_vec(*target, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{AffineTransform2D, RigidTransform2D};

    fn grid(w: usize, h: usize) -> Grid2D {
        Grid2D::new(w, h, [1.0, 1.0], [0.0, 0.0]).unwrap()
    }

    fn ramp(g: Grid2D) -> ScalarImage2D {
        ScalarImage2D::from_fn(g, |x, y| (x * 3 + y * 7) as f64 * 0.37 + ((x * y) % 5) as f64)
    }

    #[test]
    fn identity_is_exact() {
        let g = Grid2D::new(13, 9, [0.4, 0.3], [-31.8, 7.1]).unwrap();
        let img = ramp(g);
        let id = Transform2D::identity();
        let near = resample_scalar(&img, &g, &id, Interpolation::Nearest, 0.0).unwrap();
        assert_eq!(near, img);
        let lin = resample_scalar(&img, &g, &id, Interpolation::Linear, 0.0).unwrap();
        for (a, b) in lin.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn one_pixel_shift_linear() {
        let g = grid(6, 4);
        let img = ramp(g);
        let t = Transform2D::Rigid(RigidTransform2D::new(0.0, [1.0, 0.0], [0.0, 0.0]));
        let out = resample_scalar(&img, &g, &t, Interpolation::Linear, -5.0).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert!((out.get(x, y) - img.get(x + 1, y)).abs() < 1e-12);
            }
            assert_eq!(out.get(5, y), -5.0);
        }
    }

    #[test]
    fn rotated_one_hot_preserves_mass() {
        // one-hot at (10, 10); rotate 45 degrees about a point off the pixel centre
        let g = grid(21, 21);
        let mut data = vec![0.0; g.len()];
        data[10 * 21 + 10] = 1.0;
        let img = ScalarImage2D::new(g, data).unwrap();
        let t = Transform2D::Rigid(RigidTransform2D::new(
            std::f64::consts::FRAC_PI_4,
            [0.0, 0.0],
            [10.3, 9.6],
        ));
        let out = resample_scalar(&img, &g, &t, Interpolation::Linear, 0.0).unwrap();

        // brute-force bilinear weights: each target pixel receives the tent
        // weight (1-|dx|)(1-|dy|) of its source position relative to (10, 10)
        let mut expected = 0.0;
        for y in 0..21 {
            for x in 0..21 {
                let q = t.apply([x as f64, y as f64]);
                let w = (1.0 - (q[0] - 10.0).abs()).max(0.0) * (1.0 - (q[1] - 10.0).abs()).max(0.0);
                assert!((out.get(x, y) - w).abs() < 1e-12);
                expected += w;
            }
        }
        let total: f64 = out.data().iter().sum();
        assert!((total - expected).abs() < 1e-12);

        // pull-resampling preserves a constant field rather than total mass
        let ones = ScalarImage2D::filled(g, 1.0);
        let near = Grid2D::new(5, 5, [1.0, 1.0], [8.0, 8.0]).unwrap();
        let moved = resample_scalar(&ones, &near, &t, Interpolation::Linear, 0.0).unwrap();
        assert!(moved.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn label_translation_vacates_with_background() {
        let g = grid(5, 5);
        let m = LabelMask2D::from_fn(g, |x, _| if x >= 2 { 3 } else { 1 });
        let t = Transform2D::Rigid(RigidTransform2D::new(0.0, [1.0, 0.0], [0.0, 0.0]));
        let out = resample_label(&m, &g, &t).unwrap();
        for y in 0..5 {
            assert_eq!(out.get(0, y), 1);
            assert_eq!(out.get(1, y), 3);
            assert_eq!(out.get(4, y), 0);
        }
        assert_eq!(resample_label(&m, &g, &Transform2D::identity()).unwrap(), m);
    }

    #[test]
    fn rotated_disc_area_is_stable() {
        let g = grid(81, 81);
        let disc = LabelMask2D::from_fn(g, |x, y| {
            u16::from((x as f64 - 40.0).hypot(y as f64 - 40.0) <= 25.0)
        });
        let t = Transform2D::Rigid(RigidTransform2D::new(10f64.to_radians(), [0.0, 0.0], [40.0, 40.0]));
        let out = resample_label(&disc, &g, &t).unwrap();
        let a = disc.count(1) as f64;
        let b = out.count(1) as f64;
        assert!((a - b).abs() / a < 0.02);
    }

    #[test]
    fn non_finite_transform_is_rejected() {
        let g = grid(3, 3);
        let img = ramp(g);
        let t = Transform2D::Affine(AffineTransform2D::new(
            [[f64::NAN, 0.0], [0.0, 1.0]],
            [0.0, 0.0],
            [0.0, 0.0],
        ));
        assert!(matches!(
            resample_scalar(&img, &g, &t, Interpolation::Linear, 0.0),
            Err(Error::NonFiniteTransform)
        ));
        let m = LabelMask2D::filled(g, 1);
        assert!(resample_label(&m, &g, &t).is_err());
    }
}
