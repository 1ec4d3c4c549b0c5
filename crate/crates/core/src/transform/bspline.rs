use serde::{Deserialize, Serialize};

use super::mat_inverse;
use crate::image::Grid2D;
use crate::{Error, Point2, Result};

/// Uniform cubic B-spline basis at `t ∈ [0, 1]`.
#[inline]
pub fn bspline_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

#[inline]
pub fn bspline_derivatives(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [
        -0.5 * s * s,
        (3.0 * t * t - 4.0 * t) / 2.0,
        (-3.0 * t * t + 2.0 * t + 1.0) / 2.0,
        0.5 * t * t,
    ]
}

/// Control-point footprint of one location: base indices and the 4×4
/// tensor-product weights `wx[a]·wy[b]` for control point `(i+a, j+b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfdSupport {
    pub i: usize,
    pub j: usize,
    pub wx: [f64; 4],
    pub wy: [f64; 4],
    pub t: [f64; 2],
}

/// Cubic B-spline free-form deformation `p -> p + d(p)`.
///
/// Control point `(a, b)` sits at `domain_origin + (a - 1, b - 1)·spacing`,
/// so a grid of `n` points per axis covers `n - 3` cells of the domain.
/// Coefficients are row-major displacement vectors in mm. Points outside the
/// domain are not displaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineFFD2D {
    grid_size: [usize; 2],
    control_spacing: [f64; 2],
    domain_origin: Point2,
    coefficients: Vec<[f64; 2]>,
}

impl BSplineFFD2D {
    pub fn new(
        grid_size: [usize; 2],
        control_spacing: [f64; 2],
        domain_origin: Point2,
        coefficients: Vec<[f64; 2]>,
    ) -> Result<Self> {
        if grid_size[0] < 4 || grid_size[1] < 4 {
            return Err(Error::InvalidArgument(format!(
                "FFD control grid must be at least 4x4, got {}x{}",
                grid_size[0], grid_size[1]
            )));
        }
        if !control_spacing.iter().all(|s| s.is_finite() && *s > 0.0) || !domain_origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("FFD spacing must be positive and origin finite".into()));
        }
        if coefficients.len() != grid_size[0] * grid_size[1] {
            return Err(Error::ParameterLength {
                expected: 2 * grid_size[0] * grid_size[1],
                got: 2 * coefficients.len(),
            });
        }
        if !coefficients.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteTransform);
        }
        Ok(BSplineFFD2D {
            grid_size,
            control_spacing,
            domain_origin,
            coefficients,
        })
    }

    /// Zero deformation whose domain is the full extent of `grid`, split into
    /// `cells` equal intervals per axis.
    pub fn covering(grid: &Grid2D, cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::InvalidArgument("FFD needs at least one cell".into()));
        }
        let ext = grid.extent();
        let n = cells + 3;
        Self::new(
            [n, n],
            [ext[0] / cells as f64, ext[1] / cells as f64],
            grid.lower_edge(),
            vec![[0.0, 0.0]; n * n],
        )
    }

    pub fn grid_size(&self) -> [usize; 2] {
        self.grid_size
    }

    pub fn control_spacing(&self) -> [f64; 2] {
        self.control_spacing
    }

    pub fn domain_origin(&self) -> Point2 {
        self.domain_origin
    }

    pub fn cells(&self) -> [usize; 2] {
        [self.grid_size[0] - 3, self.grid_size[1] - 3]
    }

    pub fn domain_extent(&self) -> [f64; 2] {
        let c = self.cells();
        [c[0] as f64 * self.control_spacing[0], c[1] as f64 * self.control_spacing[1]]
    }

    pub fn coefficients(&self) -> &[[f64; 2]] {
        &self.coefficients
    }

    pub fn control_point(&self, a: usize, b: usize) -> Point2 {
        [
            self.domain_origin[0] + (a as f64 - 1.0) * self.control_spacing[0],
            self.domain_origin[1] + (b as f64 - 1.0) * self.control_spacing[1],
        ]
    }

    pub fn set_coefficient(&mut self, a: usize, b: usize, value: [f64; 2]) {
        let n = self.grid_size[0];
        self.coefficients[b * n + a] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.coefficients.iter().flatten().all(|v| v.is_finite())
            && self.control_spacing.iter().chain(&self.domain_origin).all(|v| v.is_finite())
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.coefficients.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Footprint at `p`, or `None` outside the domain.
    #[inline]
    pub fn support(&self, p: Point2) -> Option<FfdSupport> {
        let cells = self.cells();
        let mut idx = [0usize; 2];
        let mut t = [0.0; 2];
        for k in 0..2 {
            let u = (p[k] - self.domain_origin[k]) / self.control_spacing[k];
            let n = cells[k] as f64;
            if !(0.0..=n).contains(&u) {
                return None;
            }
            let c = (u.floor() as usize).min(cells[k] - 1);
            idx[k] = c;
            t[k] = u - c as f64;
        }
        Some(FfdSupport {
            i: idx[0],
            j: idx[1],
            wx: bspline_weights(t[0]),
            wy: bspline_weights(t[1]),
            t,
        })
    }

    /// Displacement in mm at `p`.
    #[inline]
    pub fn displacement(&self, p: Point2) -> [f64; 2] {
        match self.support(p) {
            Some(s) => self.displacement_with(&s),
            None => [0.0, 0.0],
        }
    }

    #[inline]
    pub fn displacement_with(&self, s: &FfdSupport) -> [f64; 2] {
        let n = self.grid_size[0];
        let mut d = [0.0, 0.0];
        for b in 0..4 {
            let row = (s.j + b) * n + s.i;
            let mut acc = [0.0, 0.0];
            for a in 0..4 {
                let c = self.coefficients[row + a];
                acc[0] += s.wx[a] * c[0];
                acc[1] += s.wx[a] * c[1];
            }
            d[0] += s.wy[b] * acc[0];
            d[1] += s.wy[b] * acc[1];
        }
        d
    }

    /// `∂d/∂p` (row = displacement component, column = coordinate).
    pub fn displacement_jacobian(&self, p: Point2) -> [[f64; 2]; 2] {
        let Some(s) = self.support(p) else {
            return [[0.0; 2]; 2];
        };
        let dx = bspline_derivatives(s.t[0]);
        let dy = bspline_derivatives(s.t[1]);
        let n = self.grid_size[0];
        let mut jac = [[0.0; 2]; 2];
        for b in 0..4 {
            for a in 0..4 {
                let c = self.coefficients[(s.j + b) * n + s.i + a];
                let gx = dx[a] * s.wy[b] / self.control_spacing[0];
                let gy = s.wx[a] * dy[b] / self.control_spacing[1];
                for k in 0..2 {
                    jac[k][0] += c[k] * gx;
                    jac[k][1] += c[k] * gy;
                }
            }
        }
        jac
    }

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        let d = self.displacement(p);
        [p[0] + d[0], p[1] + d[1]]
    }

    /// Newton solve of `p + d(p) = q`.
    pub fn invert_point(&self, q: Point2) -> Result<Point2> {
        let d = self.displacement(q);
        let mut p = [q[0] - d[0], q[1] - d[1]];
        for _ in 0..50 {
            let f = self.apply(p);
            let r = [f[0] - q[0], f[1] - q[1]];
            if r[0].hypot(r[1]) < 1e-11 {
                break;
            }
            let j = self.displacement_jacobian(p);
            let m = mat_inverse(&[[1.0 + j[0][0], j[0][1]], [j[1][0], 1.0 + j[1][1]]])?;
            p[0] -= m[0][0] * r[0] + m[0][1] * r[1];
            p[1] -= m[1][0] * r[0] + m[1][1] * r[1];
        }
        Ok(p)
    }

    /// All x components row-major, then all y components.
    pub fn parameters(&self) -> Vec<f64> {
        self.coefficients
            .iter()
            .map(|c| c[0])
            .chain(self.coefficients.iter().map(|c| c[1]))
            .collect()
    }

    pub fn from_parameters(
        grid_size: [usize; 2],
        control_spacing: [f64; 2],
        domain_origin: Point2,
        v: &[f64],
    ) -> Result<Self> {
        let n = grid_size[0] * grid_size[1];
        if v.len() != 2 * n {
            return Err(Error::ParameterLength {
                expected: 2 * n,
                got: v.len(),
            });
        }
        let coefficients = (0..n).map(|k| [v[k], v[n + k]]).collect();
        Self::new(grid_size, control_spacing, domain_origin, coefficients)
    }

    pub fn with_parameters(&self, v: &[f64]) -> Result<Self> {
        Self::from_parameters(self.grid_size, self.control_spacing, self.domain_origin, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ffd() -> BSplineFFD2D {
        let grid = Grid2D::new(40, 30, [0.5, 0.5], [-10.0, -7.0]).unwrap();
        BSplineFFD2D::covering(&grid, 8).unwrap()
    }

    #[test]
    fn basis_is_partition_of_unity() {
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let w = bspline_weights(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(bspline_derivatives(t).iter().sum::<f64>().abs() < 1e-15);
        }
        assert_eq!(bspline_weights(0.0), [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0, 0.0]);
    }

    #[test]
    fn zero_and_uniform_coefficients() {
        let mut f = ffd();
        assert_eq!(f.grid_size(), [11, 11]);
        assert_eq!(f.displacement([0.3, 1.7]), [0.0, 0.0]);
        let [nx, ny] = f.grid_size();
        for b in 0..ny {
            for a in 0..nx {
                f.set_coefficient(a, b, [1.25, 1.25]);
            }
        }
        let d = f.displacement([0.3, 1.7]);
        assert!((d[0] - 1.25).abs() < 1e-12 && (d[1] - 1.25).abs() < 1e-12);
        for b in 0..ny {
            for a in 0..nx {
                f.set_coefficient(a, b, [-0.7, 0.0]);
            }
        }
        let p = [4.0, -3.0];
        let q = f.apply(p);
        assert!((q[0] - (p[0] - 0.7)).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        assert_eq!(f.displacement([100.0, 0.0]), [0.0, 0.0]);
    }

    #[test]
    fn single_control_point_at_its_location() {
        let mut f = ffd();
        f.set_coefficient(5, 4, [9.0, 0.0]);
        let p = f.control_point(5, 4);
        // Oracle: direct sum over the whole grid of coefficient × B(u) B(v),
        // with the cubic B-spline kernel evaluated at offsets from p.
        let kernel = |x: f64| {
            let x = x.abs();
            if x < 1.0 {
                2.0 / 3.0 - x * x + x * x * x / 2.0
            } else if x < 2.0 {
                (2.0 - x).powi(3) / 6.0
            } else {
                0.0
            }
        };
        let [nx, ny] = f.grid_size();
        let s = f.control_spacing();
        let mut oracle = [0.0, 0.0];
        for b in 0..ny {
            for a in 0..nx {
                let c = f.coefficients()[b * nx + a];
                let cp = f.control_point(a, b);
                let w = kernel((p[0] - cp[0]) / s[0]) * kernel((p[1] - cp[1]) / s[1]);
                oracle[0] += c[0] * w;
                oracle[1] += c[1] * w;
            }
        }
        let d = f.displacement(p);
        assert!((d[0] - 4.0).abs() < 1e-12, "{d:?}");
        assert!(d[1].abs() < 1e-15);
        assert!((d[0] - oracle[0]).abs() < 1e-12);
    }

    #[test]
    fn parameter_layout_is_x_plane_then_y_plane() {
        let mut f = ffd();
        f.set_coefficient(1, 0, [3.0, 4.0]);
        let v = f.parameters();
        assert_eq!(v.len(), 242);
        assert_eq!(v[1], 3.0);
        assert_eq!(v[121 + 1], 4.0);
        assert!(f.with_parameters(&v[..10]).is_err());
    }

    fn random_ffd(seed: u64, amp: f64) -> BSplineFFD2D {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f = ffd();
        let v: Vec<f64> = (0..f.parameters().len()).map(|_| rng.random_range(-amp..amp)).collect();
        f.with_parameters(&v).unwrap()
    }

    proptest! {
        #[test]
        fn parameter_round_trip_is_exact(seed in 0u64..1000) {
            let f = random_ffd(seed, 3.0);
            let back = f.with_parameters(&f.parameters()).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn jacobian_matches_central_differences(seed in 0u64..1000, x in -9.0f64..9.5, y in -6.5f64..7.5) {
            let f = random_ffd(seed, 1.0);
            let h = 1e-5;
            let jac = f.displacement_jacobian([x, y]);
            for k in 0..2 {
                let mut hi = [x, y];
                let mut lo = [x, y];
                hi[k] += h;
                lo[k] -= h;
                let (a, b) = (f.displacement(hi), f.displacement(lo));
                for c in 0..2 {
                    let fd = (a[c] - b[c]) / (2.0 * h);
                    prop_assert!((fd - jac[c][k]).abs() < 1e-4, "{} vs {}", fd, jac[c][k]);
                }
            }
        }

        #[test]
        fn newton_inverse_recovers_points(seed in 0u64..1000, x in -8.0f64..8.0, y in -5.0f64..5.0) {
            let f = random_ffd(seed, 0.3);
            let p = [x, y];
            let back = f.invert_point(f.apply(p)).unwrap();
            prop_assert!((back[0] - p[0]).abs() < 1e-8 && (back[1] - p[1]).abs() < 1e-8);
        }
    }
}
