//! Similarity metrics (lower is better) and finite-difference gradients.

use serde::{Deserialize, Serialize};

use crate::image::{resample_scalar, Grid2D, Interpolation, LabelMask2D, ScalarImage2D};
use crate::transform::{bspline_weights, Transform2D, TransformKind};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub n_samples: usize,
}

/// Indices of the pixels that take part in a metric evaluation.
fn region_indices(grid: &Grid2D, region: Option<&LabelMask2D>) -> Result<Vec<usize>> {
    let idx: Vec<usize> = match region {
        Some(r) => {
            r.grid().ensure_same(grid, "metric region")?;
            r.data().iter().enumerate().filter(|(_, &v)| v != 0).map(|(k, _)| k).collect()
        }
        None => (0..grid.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::EmptyRegion("metric region has no pixels".into()));
    }
    Ok(idx)
}

/// Mean squared difference over the region (whole image without one).
pub fn ssd(fixed: &ScalarImage2D, moving: &ScalarImage2D, region: Option<&LabelMask2D>) -> Result<MetricValue> {
    fixed.grid().ensure_same(moving.grid(), "moving image")?;
    let idx = region_indices(fixed.grid(), region)?;
    let (f, m) = (fixed.data(), moving.data());
    let sum: f64 = idx.iter().map(|&k| (f[k] - m[k]).powi(2)).sum();
    Ok(MetricValue {
        value: sum / idx.len() as f64,
        n_samples: idx.len(),
    })
}

fn range_of(values: &[f64], idx: &[usize]) -> (f64, f64) {
    idx.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &k| (lo.min(values[k]), hi.max(values[k])))
}

/// Hard bin index with linear binning over `[lo, hi]`; the top edge lands in
/// the last bin and a constant image uses bin 0.
#[inline]
pub fn hard_bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((v - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

fn entropy_sum(h: &[f64]) -> f64 {
    h.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

/// MI in nats from a joint histogram of total mass `n`.
fn mi_from_joint(joint: &[f64], bins_f: usize, bins_m: usize, n: f64) -> f64 {
    let mut hf = vec![0.0; bins_f];
    let mut hm = vec![0.0; bins_m];
    for f in 0..bins_f {
        for m in 0..bins_m {
            let v = joint[f * bins_m + m];
            hf[f] += v;
            hm[m] += v;
        }
    }
    let mi = (entropy_sum(joint) - entropy_sum(&hf) - entropy_sum(&hm)) / n + n.ln();
    mi.max(0.0)
}

/// Negative mutual information from a hard-binned joint histogram with
/// per-image min/max binning over the region. Natural log.
pub fn mutual_information(
    fixed: &ScalarImage2D,
    moving: &ScalarImage2D,
    bins: usize,
    region: Option<&LabelMask2D>,
) -> Result<MetricValue> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 histogram bins, got {bins}")));
    }
    fixed.grid().ensure_same(moving.grid(), "moving image")?;
    let idx = region_indices(fixed.grid(), region)?;
    let (f, m) = (fixed.data(), moving.data());
    let (flo, fhi) = range_of(f, &idx);
    let (mlo, mhi) = range_of(m, &idx);
    let mut joint = vec![0.0; bins * bins];
    for &k in &idx {
        joint[hard_bin(f[k], flo, fhi, bins) * bins + hard_bin(m[k], mlo, mhi, bins)] += 1.0;
    }
    let mi = mi_from_joint(&joint, bins, bins, idx.len() as f64);
    Ok(MetricValue {
        value: -mi,
        n_samples: idx.len(),
    })
}

/// Cubic B-spline Parzen window of a moving intensity: first bin and the
/// four weights. Bins past either end are folded onto the edge bins by the
/// caller.
#[inline]
fn parzen_window(v: f64, lo: f64, scale: f64) -> (isize, [f64; 4]) {
    let x = (v - lo) * scale;
    let fl = x.floor();
    (fl as isize - 1, bspline_weights(x - fl))
}

/// Joint histogram with a hard-binned fixed axis and a cubic B-spline Parzen
/// window on the moving axis. Supports exact trial updates: changes made
/// between [`ParzenHistogram::begin_trial`] and
/// [`ParzenHistogram::end_trial`] are rolled back bit-for-bit.
#[derive(Clone, Debug)]
pub struct ParzenHistogram {
    bins: usize,
    lo: f64,
    scale: f64,
    joint: Vec<f64>,
    marginal: Vec<f64>,
    total: f64,
    s_joint: f64,
    s_marginal: f64,
    s_fixed: f64,
    saved_joint: Vec<(usize, f64)>,
    saved_marginal: Vec<(usize, f64)>,
    joint_mark: Vec<bool>,
    marginal_mark: Vec<bool>,
    in_trial: bool,
}

impl ParzenHistogram {
    /// `moving_range` is the intensity range mapped onto the bins.
    pub fn new(bins: usize, moving_range: (f64, f64)) -> Result<Self> {
        if bins < 4 {
            return Err(Error::InvalidArgument(format!("Parzen histogram needs at least 4 bins, got {bins}")));
        }
        let (lo, hi) = moving_range;
        let scale = if hi > lo { (bins - 1) as f64 / (hi - lo) } else { 0.0 };
        Ok(ParzenHistogram {
            bins,
            lo,
            scale,
            joint: vec![0.0; bins * bins],
            marginal: vec![0.0; bins],
            total: 0.0,
            s_joint: 0.0,
            s_marginal: 0.0,
            s_fixed: 0.0,
            saved_joint: Vec::new(),
            saved_marginal: Vec::new(),
            joint_mark: vec![false; bins * bins],
            marginal_mark: vec![false; bins],
            in_trial: false,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Rebuild from scratch.
    pub fn fill(&mut self, fixed_bins: &[u16], moving: &[f64]) {
        self.joint.iter_mut().for_each(|v| *v = 0.0);
        self.marginal.iter_mut().for_each(|v| *v = 0.0);
        let mut fixed = vec![0.0; self.bins];
        for (&fb, &m) in fixed_bins.iter().zip(moving) {
            self.deposit(fb as usize, m, 1.0, false);
            fixed[fb as usize] += 1.0;
        }
        self.total = fixed_bins.len() as f64;
        self.s_joint = entropy_sum(&self.joint);
        self.s_marginal = entropy_sum(&self.marginal);
        self.s_fixed = entropy_sum(&fixed);
    }

    #[inline]
    fn touch(&mut self, j: Option<usize>, m: Option<usize>) {
        if let Some(j) = j {
            if !self.joint_mark[j] {
                self.joint_mark[j] = true;
                self.saved_joint.push((j, self.joint[j]));
            }
        }
        if let Some(m) = m {
            if !self.marginal_mark[m] {
                self.marginal_mark[m] = true;
                self.saved_marginal.push((m, self.marginal[m]));
            }
        }
    }

    #[inline]
    fn deposit(&mut self, fb: usize, m: f64, sign: f64, track: bool) {
        let (start, w) = parzen_window(m, self.lo, self.scale);
        let last = self.bins as isize - 1;
        for (a, &wa) in w.iter().enumerate() {
            if wa == 0.0 {
                continue;
            }
            let b = (start + a as isize).clamp(0, last) as usize;
            let j = fb * self.bins + b;
            if track {
                self.touch(Some(j), Some(b));
            }
            self.joint[j] += sign * wa;
            self.marginal[b] += sign * wa;
        }
    }

    pub fn begin_trial(&mut self) {
        debug_assert!(!self.in_trial);
        self.in_trial = true;
    }

    /// Replace one sample's moving intensity during a trial.
    #[inline]
    pub fn trial_move(&mut self, fixed_bin: u16, old: f64, new: f64) {
        debug_assert!(self.in_trial);
        self.deposit(fixed_bin as usize, old, -1.0, true);
        self.deposit(fixed_bin as usize, new, 1.0, true);
    }

    /// Negative MI of the trial state, then roll back.
    pub fn end_trial(&mut self) -> f64 {
        let mut s_joint = self.s_joint;
        for &(j, old) in &self.saved_joint {
            s_joint += xlogx(self.joint[j]) - xlogx(old);
        }
        let mut s_marginal = self.s_marginal;
        for &(m, old) in &self.saved_marginal {
            s_marginal += xlogx(self.marginal[m]) - xlogx(old);
        }
        let value = self.neg_mi(s_joint, s_marginal);
        for &(j, old) in &self.saved_joint {
            self.joint[j] = old;
            self.joint_mark[j] = false;
        }
        for &(m, old) in &self.saved_marginal {
            self.marginal[m] = old;
            self.marginal_mark[m] = false;
        }
        self.saved_joint.clear();
        self.saved_marginal.clear();
        self.in_trial = false;
        value
    }

    fn neg_mi(&self, s_joint: f64, s_marginal: f64) -> f64 {
        let n = self.total;
        -((s_joint - self.s_fixed - s_marginal) / n + n.ln())
    }

    /// Negative MI of the current (committed) state.
    pub fn value(&self) -> f64 {
        self.neg_mi(self.s_joint, self.s_marginal)
    }
}

#[inline]
fn xlogx(v: f64) -> f64 {
    if v > 1e-300 {
        v * v.ln()
    } else {
        0.0
    }
}

/// Fixed-image hard bins over the region, using the region's min/max.
pub fn fixed_bins(values: &[f64], idx: &[usize], bins: usize) -> Vec<u16> {
    let (lo, hi) = range_of(values, idx);
    idx.iter().map(|&k| hard_bin(values[k], lo, hi, bins) as u16).collect()
}

/// Negative Mattes-style MI: fixed hard-binned, moving Parzen-windowed over
/// `moving_range` (the moving region's min/max when `None`).
pub fn parzen_mutual_information(
    fixed: &ScalarImage2D,
    moving: &ScalarImage2D,
    bins: usize,
    region: Option<&LabelMask2D>,
    moving_range: Option<(f64, f64)>,
) -> Result<MetricValue> {
    fixed.grid().ensure_same(moving.grid(), "moving image")?;
    let idx = region_indices(fixed.grid(), region)?;
    let fb = fixed_bins(fixed.data(), &idx, bins);
    let m: Vec<f64> = idx.iter().map(|&k| moving.data()[k]).collect();
    let range = moving_range.unwrap_or_else(|| range_of(moving.data(), &idx));
    let mut h = ParzenHistogram::new(bins, range)?;
    h.fill(&fb, &m);
    Ok(MetricValue {
        value: h.value(),
        n_samples: idx.len(),
    })
}

/// Metric selector for the generic (resampling) gradient path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    Ssd,
    MutualInformation { bins: usize },
    /// `moving_range` fixes the Parzen intensity axis; without it the
    /// region's min/max of the resampled image is used.
    ParzenMutualInformation {
        bins: usize,
        moving_range: Option<[f64; 2]>,
    },
}

impl Metric {
    pub fn evaluate(
        &self,
        fixed: &ScalarImage2D,
        moving_resampled: &ScalarImage2D,
        region: Option<&LabelMask2D>,
    ) -> Result<MetricValue> {
        match *self {
            Metric::Ssd => ssd(fixed, moving_resampled, region),
            Metric::MutualInformation { bins } => mutual_information(fixed, moving_resampled, bins, region),
            Metric::ParzenMutualInformation { bins, moving_range } => {
                parzen_mutual_information(fixed, moving_resampled, bins, region, moving_range.map(|[a, b]| (a, b)))
            }
        }
    }
}

/// Per-parameter central-difference steps: 1e-3 rad for angles and matrix
/// entries, a tenth of a pixel for translations and FFD coefficients.
pub fn fd_steps(kind: &TransformKind, pixel_spacing: [f64; 2]) -> Vec<f64> {
    let [sx, sy] = pixel_spacing;
    match kind {
        TransformKind::Rigid { .. } => vec![1e-3, 0.1 * sx, 0.1 * sy],
        TransformKind::Affine { .. } => vec![1e-3, 1e-3, 1e-3, 1e-3, 0.1 * sx, 0.1 * sy],
        TransformKind::Flip => Vec::new(),
        TransformKind::Ffd { grid_size, .. } => {
            let n = grid_size[0] * grid_size[1];
            std::iter::repeat_n(0.1 * sx, n).chain(std::iter::repeat_n(0.1 * sy, n)).collect()
        }
        TransformKind::Composite(kinds) => kinds.iter().flat_map(|k| fd_steps(k, pixel_spacing)).collect(),
    }
}

/// Central differences of `f` at `x` with per-coordinate steps.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    steps: &[f64],
) -> Result<Vec<f64>> {
    if steps.len() != x.len() {
        return Err(Error::ParameterLength {
            expected: x.len(),
            got: steps.len(),
        });
    }
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = steps[i];
        probe[i] = x[i] + h;
        let hi = f(&probe)?;
        probe[i] = x[i] - h;
        let lo = f(&probe)?;
        probe[i] = x[i];
        g.push((hi - lo) / (2.0 * h));
    }
    Ok(g)
}

/// Gradient of `metric(fixed, moving ∘ transform)` over the transform's
/// parameters, by central differences with [`fd_steps`] at the fixed image's
/// pixel spacing.
pub fn metric_gradient(
    metric: Metric,
    transform: &Transform2D,
    fixed: &ScalarImage2D,
    moving: &ScalarImage2D,
    region: Option<&LabelMask2D>,
) -> Result<Vec<f64>> {
    let kind = transform.kind();
    let steps = fd_steps(&kind, fixed.grid().spacing());
    let x = transform.parameters();
    finite_difference_gradient(
        |p| {
            let t = Transform2D::from_parameters(&kind, p)?;
            let warped = resample_scalar(moving, fixed.grid(), &t, Interpolation::Linear, 0.0)?;
            Ok(metric.evaluate(fixed, &warped, region)?.value)
        },
        &x,
        &steps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{AffineTransform2D, BSplineFFD2D, RigidTransform2D};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid2D {
        Grid2D::new(n, n, [1.0, 1.0], [0.0, 0.0]).unwrap()
    }

    fn noise(n: usize, seed: u64) -> ScalarImage2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarImage2D::from_fn(grid(n), |_, _| rng.random::<f64>())
    }

    /// Independent MI oracle: explicit probability tables, `p ln(p / (pf pm))`.
    fn mi_oracle(a: &[usize], b: &[usize], bins: usize) -> f64 {
        let n = a.len() as f64;
        let mut pj = vec![vec![0.0; bins]; bins];
        for (&x, &y) in a.iter().zip(b) {
            pj[x][y] += 1.0 / n;
        }
        let pa: Vec<f64> = (0..bins).map(|i| pj[i].iter().sum()).collect();
        let pb: Vec<f64> = (0..bins).map(|j| (0..bins).map(|i| pj[i][j]).sum()).collect();
        let mut mi = 0.0;
        for i in 0..bins {
            for j in 0..bins {
                if pj[i][j] > 0.0 {
                    mi += pj[i][j] * (pj[i][j] / (pa[i] * pb[j])).ln();
                }
            }
        }
        mi
    }

    #[test]
    fn ssd_examples() {
        let a = noise(16, 1);
        assert_eq!(ssd(&a, &a, None).unwrap().value, 0.0);
        let b = a.map(|v| v + 2.0);
        assert!((ssd(&a, &b, None).unwrap().value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ssd_binary_masks_match_mismatch_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = ScalarImage2D::from_fn(grid(32), |_, _| rng.random_range(0..2) as f64);
        let b = ScalarImage2D::from_fn(grid(32), |_, _| rng.random_range(0..2) as f64);
        let region = LabelMask2D::from_fn(grid(32), |x, y| u16::from((x + y) % 3 != 0));
        let mut mismatched = 0usize;
        let mut n = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                if region.get(x, y) != 0 {
                    n += 1;
                    if a.get(x, y) != b.get(x, y) {
                        mismatched += 1;
                    }
                }
            }
        }
        let v = ssd(&a, &b, Some(&region)).unwrap();
        assert_eq!(v.n_samples, n);
        assert_eq!(v.value, mismatched as f64 / n as f64);
    }

    #[test]
    fn ssd_empty_region_is_an_error() {
        let a = noise(8, 1);
        let empty = LabelMask2D::filled(grid(8), 0);
        assert!(matches!(ssd(&a, &a, Some(&empty)), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn constant_images_have_zero_mi() {
        let a = ScalarImage2D::filled(grid(8), 3.0);
        let b = ScalarImage2D::filled(grid(8), -1.0);
        assert_eq!(mutual_information(&a, &b, 32, None).unwrap().value, 0.0);
    }

    #[test]
    fn ramp_with_itself_gives_ln_bins() {
        // 32 intensity levels, 8 pixels each: every bin holds the same count.
        let g = Grid2D::new(16, 16, [1.0, 1.0], [0.0, 0.0]).unwrap();
        let ramp = ScalarImage2D::from_fn(g, |x, y| ((y * 16 + x) / 8) as f64);
        let v = mutual_information(&ramp, &ramp, 32, None).unwrap();
        let levels: Vec<usize> = ramp.data().iter().map(|&v| v as usize).collect();
        let oracle = mi_oracle(&levels, &levels, 32);
        assert!((oracle - 32f64.ln()).abs() < 1e-12);
        assert!((-v.value - oracle).abs() < 1e-12);
        assert!((-v.value - 3.4657).abs() < 1e-4);
    }

    #[test]
    fn independent_noise_has_small_mi() {
        let mut total = 0.0;
        for seed in 0..10 {
            let a = noise(64, 100 + seed);
            let b = noise(64, 200 + seed);
            total += -mutual_information(&a, &b, 32, None).unwrap().value;
        }
        assert!(total / 10.0 < 0.15, "mean MI {}", total / 10.0);
    }

    #[test]
    fn mi_matches_probability_oracle() {
        let a = noise(24, 5);
        let b = a.map(|v| (v * 3.0).sin() + 0.1 * v);
        let bins = 16;
        let (alo, ahi) = a.min_max();
        let (blo, bhi) = b.min_max();
        let ia: Vec<usize> = a.data().iter().map(|&v| hard_bin(v, alo, ahi, bins)).collect();
        let ib: Vec<usize> = b.data().iter().map(|&v| hard_bin(v, blo, bhi, bins)).collect();
        let v = mutual_information(&a, &b, bins, None).unwrap();
        assert!((-v.value - mi_oracle(&ia, &ib, bins)).abs() < 1e-12);
    }

    #[test]
    fn parzen_trials_roll_back_exactly() {
        let a = noise(20, 8);
        let b = noise(20, 9);
        let idx: Vec<usize> = (0..400).collect();
        let fb = fixed_bins(a.data(), &idx, 16);
        let mut h = ParzenHistogram::new(16, (0.0, 1.0)).unwrap();
        h.fill(&fb, b.data());
        let before = h.value();
        let joint_before = h.joint.clone();
        h.begin_trial();
        for k in 0..50 {
            h.trial_move(fb[k], b.data()[k], 1.0 - b.data()[k]);
        }
        let trial = h.end_trial();
        assert_eq!(h.joint, joint_before);
        assert_eq!(h.value(), before);
        let mut moved = b.data().to_vec();
        for v in moved.iter_mut().take(50) {
            *v = 1.0 - *v;
        }
        let mut fresh = ParzenHistogram::new(16, (0.0, 1.0)).unwrap();
        fresh.fill(&fb, &moved);
        assert!((trial - fresh.value()).abs() < 1e-10);
    }

    #[test]
    fn parzen_joint_mass_is_sample_count() {
        let a = noise(10, 1);
        let b = noise(10, 2);
        let idx: Vec<usize> = (0..100).collect();
        let mut h = ParzenHistogram::new(8, (0.0, 1.0)).unwrap();
        h.fill(&fixed_bins(a.data(), &idx, 8), b.data());
        assert!((h.joint.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    fn blob(g: Grid2D, c: [f64; 2], s: f64) -> ScalarImage2D {
        ScalarImage2D::from_fn(g, |x, y| {
            let p = g.index_to_physical(x as f64, y as f64);
            let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            100.0 * (-r2 / (2.0 * s * s)).exp()
        })
    }

    #[test]
    fn ssd_gradient_at_minimum_is_zero() {
        let g = grid(32);
        let a = blob(g, [16.0, 15.0], 5.0);
        let t = RigidTransform2D::about(0.0, [16.0, 15.0]).into();
        let grad = metric_gradient(Metric::Ssd, &t, &a, &a, None).unwrap();
        assert!(grad.iter().all(|v| v.abs() < 1e-6), "{grad:?}");
    }

    #[test]
    fn ssd_translation_gradient_points_toward_alignment() {
        let g = grid(40);
        let fixed = blob(g, [20.0, 20.0], 5.0);
        let moving = blob(g, [22.0, 20.0], 5.0);
        let t: Transform2D = RigidTransform2D::about(0.0, [20.0, 20.0]).into();
        let grad = metric_gradient(Metric::Ssd, &t, &fixed, &moving, None).unwrap();
        // tx must grow toward +2, so the cost falls along +tx.
        assert!(grad[1] < 0.0);
        let line = |tx: f64| {
            let t = RigidTransform2D::new(0.0, [tx, 0.0], [20.0, 20.0]).into();
            let w = resample_scalar(&moving, &g, &t, Interpolation::Linear, 0.0).unwrap();
            ssd(&fixed, &w, None).unwrap().value
        };
        let scan: Vec<f64> = (0..=8).map(|k| line(k as f64 * 0.5)).collect();
        let best = scan.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, 4);
        let directional = (line(0.05) - line(-0.05)) / 0.1;
        assert!((directional - grad[1]).abs() < 0.01 * directional.abs());
    }

    #[test]
    fn quadratic_gradient() {
        for t in [-2.0, 0.0, 0.7, 3.0] {
            let g = finite_difference_gradient(|p| Ok(p[0] * p[0]), &[t], &[1e-3]).unwrap();
            assert!((g[0] - 2.0 * t).abs() < 1e-6);
        }
    }

    /// Directional check: `g·d` against a central difference along `d`.
    fn directional_check(metric: Metric, make: impl Fn(&mut ChaCha8Rng) -> Transform2D, seed: u64) {
        let g = Grid2D::new(80, 72, [0.25, 0.25], [-10.0, -9.0]).unwrap();
        let fixed = blob(g, [0.0, 0.0], 3.0).map(|v| v + 10.0);
        let moving = ScalarImage2D::from_fn(g, |x, y| {
            let p = g.index_to_physical(x as f64, y as f64);
            let r2 = (p[0] - 0.6).powi(2) / 16.0 + (p[1] + 0.4).powi(2) / 9.0;
            60.0 * (-r2 / 2.0).exp() + 5.0
        });
        // Stay clear of the image border, where the fill value would make
        // the cost discontinuous.
        let region = LabelMask2D::from_fn(g, |x, y| {
            let p = g.index_to_physical(x as f64, y as f64);
            u16::from(p[0].hypot(p[1]) < 7.0)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let t = make(&mut rng);
            let grad = metric_gradient(metric, &t, &fixed, &moving, Some(&region)).unwrap();
            let kind = t.kind();
            let x = t.parameters();
            let steps = fd_steps(&kind, g.spacing());
            let d: Vec<f64> = steps.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect();
            let at = |eps: f64| {
                let p: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
                let t = Transform2D::from_parameters(&kind, &p).unwrap();
                let w = resample_scalar(&moving, &g, &t, Interpolation::Linear, 0.0).unwrap();
                metric.evaluate(&fixed, &w, Some(&region)).unwrap().value
            };
            let directional = (at(0.5) - at(-0.5)) / 1.0;
            let dot: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
            // Normalise by the size of the individual terms as well, so a
            // direction nearly orthogonal to the gradient is not judged on
            // cancellation noise.
            let terms: f64 = grad.iter().zip(&d).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt();
            let rel = (dot - directional).abs() / directional.abs().max(terms).max(1e-12);
            assert!(rel < 0.01, "{metric:?} {t:?}: dot {dot} vs directional {directional}");
        }
    }

    fn random_rigid(rng: &mut ChaCha8Rng) -> Transform2D {
        RigidTransform2D::new(
            rng.random_range(-0.2..0.2),
            [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            [0.0, 0.0],
        )
        .into()
    }

    fn random_affine(rng: &mut ChaCha8Rng) -> Transform2D {
        AffineTransform2D::new(
            [
                [rng.random_range(0.9..1.1), rng.random_range(-0.1..0.1)],
                [rng.random_range(-0.1..0.1), rng.random_range(0.9..1.1)],
            ],
            [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            [0.0, 0.0],
        )
        .into()
    }

    fn random_ffd(rng: &mut ChaCha8Rng) -> Transform2D {
        let g = Grid2D::new(80, 72, [0.25, 0.25], [-10.0, -9.0]).unwrap();
        let f = BSplineFFD2D::covering(&g, 4).unwrap();
        let v: Vec<f64> = f.parameters().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        f.with_parameters(&v).unwrap().into()
    }

    #[test]
    fn ssd_gradient_checks() {
        directional_check(Metric::Ssd, random_rigid, 11);
        directional_check(Metric::Ssd, random_affine, 12);
        directional_check(Metric::Ssd, random_ffd, 13);
    }

    #[test]
    fn parzen_mi_gradient_checks() {
        let m = Metric::ParzenMutualInformation {
            bins: 16,
            moving_range: Some([0.0, 70.0]),
        };
        directional_check(m, random_rigid, 21);
        directional_check(m, random_affine, 22);
        directional_check(m, random_ffd, 23);
    }

    proptest! {
        #[test]
        fn ssd_is_non_negative_and_zero_only_on_equality(seed in 0u64..500, bump in 0usize..64) {
            let a = noise(8, seed);
            let mut d = a.data().to_vec();
            d[bump] += 0.25;
            let b = ScalarImage2D::new(*a.grid(), d).unwrap();
            prop_assert_eq!(ssd(&a, &a, None).unwrap().value, 0.0);
            prop_assert!(ssd(&a, &b, None).unwrap().value > 0.0);
        }

        #[test]
        fn mi_is_symmetric_non_negative_and_scale_invariant(seed in 0u64..500, bins in 2usize..40) {
            let a = noise(16, seed);
            let b = noise(16, seed + 1000).map(|v| v * v);
            let ab = mutual_information(&a, &b, bins, None).unwrap().value;
            let ba = mutual_information(&b, &a, bins, None).unwrap().value;
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab <= 0.0);
            let scaled = mutual_information(&a.map(|v| 2.0 * v), &b, bins, None).unwrap().value;
            prop_assert!((scaled - ab).abs() < 1e-9);
        }
    }
}
