//! Free-form deformation stage: L-BFGS-B on B-spline coefficients,
//! maximising Parzen-window mutual information over a pyramid.

use log::debug;

use super::{usable_levels, RegistrationProfile, StageReport};
use crate::image::{build_pyramid, sample_linear, shrink_mask, LabelMask2D, ScalarImage2D};
use crate::metrics::{fixed_bins, ParzenHistogram};
use crate::optim::{lbfgsb_with, LbfgsbOptions, Objective};
use crate::transform::{BSplineFFD2D, FfdSupport, LinearMap, Transform2D};
use crate::{Error, Point2, Result};

/// One pyramid level of the deformable objective. Optimisation variables are
/// coefficients in level pixels.
struct FfdObjective<'a> {
    ffd: BSplineFFD2D,
    moving: &'a ScalarImage2D,
    /// Fixed physical point → moving continuous index.
    to_moving: LinearMap,
    points: Vec<Point2>,
    support: Vec<Option<FfdSupport>>,
    bins: Vec<u16>,
    /// Per control point: affected samples and their B-spline weight.
    influence: Vec<Vec<(u32, f64)>>,
    hist: ParzenHistogram,
    pixel: f64,
    step: f64,
    state: Option<Vec<f64>>,
    disp: Vec<[f64; 2]>,
    values: Vec<f64>,
}

impl<'a> FfdObjective<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ffd: BSplineFFD2D,
        fixed: &ScalarImage2D,
        moving: &'a ScalarImage2D,
        region: &LabelMask2D,
        init: &LinearMap,
        bins: usize,
    ) -> Result<Self> {
        let grid = *fixed.grid();
        let idx: Vec<usize> = region.data().iter().enumerate().filter(|(_, &v)| v != 0).map(|(k, _)| k).collect();
        if idx.len() < 16 {
            return Err(Error::EmptyRegion(format!("MI region has {} pixels, need at least 16", idx.len())));
        }
        let w = grid.width();
        let points: Vec<Point2> = idx
            .iter()
            .map(|&k| grid.index_to_physical((k % w) as f64, (k / w) as f64))
            .collect();
        let support: Vec<Option<FfdSupport>> = points.iter().map(|&p| ffd.support(p)).collect();
        let [nx, ny] = ffd.grid_size();
        let mut influence = vec![Vec::new(); nx * ny];
        for (k, s) in support.iter().enumerate() {
            if let Some(s) = s {
                for b in 0..4 {
                    for a in 0..4 {
                        influence[(s.j + b) * nx + s.i + a].push((k as u32, s.wx[a] * s.wy[b]));
                    }
                }
            }
        }
        let (sm, om) = (moving.grid().spacing(), moving.grid().origin());
        let to_moving = init.then(&LinearMap {
            a: [[1.0 / sm[0], 0.0], [0.0, 1.0 / sm[1]]],
            b: [-om[0] / sm[0], -om[1] / sm[1]],
        });
        let fixed_bins = fixed_bins(fixed.data(), &idx, bins);
        let mut hist = ParzenHistogram::new(bins, moving.min_max())?;
        let pixel = grid.spacing()[0];
        let n = points.len();
        hist.fill(&fixed_bins, &vec![0.0; n]);
        Ok(FfdObjective {
            ffd,
            moving,
            to_moving,
            points,
            support,
            bins: fixed_bins,
            influence,
            hist,
            pixel,
            step: 0.1 * pixel,
            state: None,
            disp: vec![[0.0; 2]; n],
            values: vec![0.0; n],
        })
    }

    #[inline]
    fn sample(&self, p: Point2, d: [f64; 2]) -> f64 {
        let [fx, fy] = self.to_moving.apply([p[0] + d[0], p[1] + d[1]]);
        sample_linear(self.moving.data(), self.moving.width(), self.moving.height(), fx, fy, 0.0)
    }

    fn physical(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| v * self.pixel).collect()
    }

    fn sync(&mut self, u: &[f64]) -> Result<()> {
        if self.state.as_deref() == Some(u) {
            return Ok(());
        }
        self.ffd = self.ffd.with_parameters(&self.physical(u))?;
        for k in 0..self.points.len() {
            let d = match &self.support[k] {
                Some(s) => self.ffd.displacement_with(s),
                None => [0.0, 0.0],
            };
            self.disp[k] = d;
            self.values[k] = self.sample(self.points[k], d);
        }
        self.hist.fill(&self.bins, &self.values);
        self.state = Some(u.to_vec());
        Ok(())
    }
}

impl Objective for FfdObjective<'_> {
    fn dimension(&self) -> usize {
        2 * self.influence.len()
    }

    fn value(&mut self, u: &[f64]) -> Result<f64> {
        self.sync(u)?;
        Ok(self.hist.value())
    }

    fn gradient(&mut self, u: &[f64]) -> Result<Vec<f64>> {
        self.sync(u)?;
        let n = self.influence.len();
        let mut g = vec![0.0; 2 * n];
        let h = self.step;
        for comp in 0..2 {
            for c in 0..n {
                if self.influence[c].is_empty() {
                    continue;
                }
                let mut side = [0.0; 2];
                for (slot, sign) in [(0, 1.0), (1, -1.0)] {
                    self.hist.begin_trial();
                    for &(k, w) in &self.influence[c] {
                        let k = k as usize;
                        let mut d = self.disp[k];
                        d[comp] += sign * h * w;
                        let v = self.sample(self.points[k], d);
                        self.hist.trial_move(self.bins[k], self.values[k], v);
                    }
                    side[slot] = self.hist.end_trial();
                }
                g[comp * n + c] = (side[0] - side[1]) / (2.0 * h) * self.pixel;
            }
        }
        Ok(g)
    }
}

/// Optimise an FFD (in fixed space, applied before `init`) maximising
/// Parzen MI between `fixed_gray` and `moving_gray ∘ init ∘ ffd` over
/// `region` (fixed grid; shrunk and dilated per level).
pub fn register_deformable(
    fixed_gray: &ScalarImage2D,
    moving_gray: &ScalarImage2D,
    init: &Transform2D,
    region: &LabelMask2D,
    profile: &RegistrationProfile,
) -> Result<(BSplineFFD2D, StageReport)> {
    let init_map = init.linear_map().ok_or_else(|| {
        Error::InvalidArgument("deformable initialisation must be a rigid/affine chain".into())
    })?;
    region.grid().ensure_same(fixed_gray.grid(), "deformable region")?;
    if region.foreground_count() == 0 {
        return Err(Error::EmptyRegion("deformable region".into()));
    }
    let levels = usable_levels(fixed_gray.grid(), moving_gray.grid(), &profile.levels());
    if levels.is_empty() {
        return Err(Error::InvalidArgument("deformable: images too small for any pyramid level".into()));
    }
    let factors: Vec<usize> = levels.iter().map(|l| l.0).collect();
    let sigmas: Vec<f64> = levels.iter().map(|l| l.1).collect();
    let fixed_pyr = build_pyramid(fixed_gray, &factors, &sigmas)?;
    let moving_pyr = build_pyramid(moving_gray, &factors, &sigmas)?;

    let mut ffd = BSplineFFD2D::covering(fixed_gray.grid(), profile.ffd_cells)?;
    let spacing = ffd.control_spacing();
    let nc = ffd.grid_size()[0] * ffd.grid_size()[1];
    let bound: Vec<f64> = (0..2 * nc)
        .map(|i| profile.ffd_bound * if i < nc { spacing[0] } else { spacing[1] })
        .collect();

    let mut report = StageReport::new("deformable");
    let mut last: Option<(f64, f64)> = None;
    for ((lf, lm), &factor) in fixed_pyr.iter().zip(&moving_pyr).zip(&factors) {
        let level_region = shrink_mask(region, factor)?.dilate(profile.mi_region_dilation);
        let mut obj = FfdObjective::new(ffd.clone(), lf, lm, &level_region, &init_map, profile.mi_bins)?;
        let pixel = obj.pixel;
        let u0: Vec<f64> = ffd.parameters().iter().map(|v| v / pixel).collect();
        let lower: Vec<f64> = bound.iter().map(|b| -b / pixel).collect();
        let upper: Vec<f64> = bound.iter().map(|b| b / pixel).collect();
        let zero = vec![0.0; u0.len()];
        let initial = obj.value(&zero)?;
        let opts = LbfgsbOptions {
            max_iterations: profile.lbfgsb_iterations,
            memory: profile.lbfgsb_memory,
            tol: profile.lbfgsb_tol,
            initial_step: 1.0,
        };
        let r = lbfgsb_with(&mut obj, &u0, &lower, &upper, &opts)?;
        debug!(
            "deformable level {}px: {} -> {} in {} iterations",
            pixel, r.initial_value, r.final_value, r.iterations_used
        );
        ffd = ffd.with_parameters(&obj.physical(&r.final_params))?;
        report.push_level(&r);
        last = Some((initial, r.final_value));
    }
    let (initial, final_value) = last.expect("at least one level");
    report.initial_value = initial;
    report.final_value = final_value;
    if final_value > initial {
        report.warnings.push("deformable: MI ended below the undeformed value; kept zero deformation".into());
        ffd = BSplineFFD2D::covering(fixed_gray.grid(), profile.ffd_cells)?;
        report.final_value = initial;
    }
    Ok((ffd, report))
}
