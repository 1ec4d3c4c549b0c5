//! Accuracy metrics for registered slice pairs and the rank-sum test used to
//! compare conditions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::image::{center_of_mass, LabelMask2D, PointSet2D};
use crate::{Error, Point2, Result};

/// Dice overlap of `label` in two masks on the same grid. Two empty masks
/// agree perfectly (1.0); one empty mask gives 0.0.
pub fn dice(a: &LabelMask2D, b: &LabelMask2D, label: u16) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mean per-slice Dice.
pub fn dice_case(a: &[LabelMask2D], b: &[LabelMask2D], label: u16) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "dice_case: {} slices vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("dice_case: no slices".into()));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += dice(x, y, label)?;
    }
    Ok(total / a.len() as f64)
}

/// Physical centres of foreground pixels with at least one 4-neighbour in
/// the background (pixels on the image edge count as boundary).
pub fn boundary_points(mask: &LabelMask2D) -> Vec<Point2> {
    let (w, h) = (mask.width(), mask.height());
    let d = mask.data();
    let fg = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && d[y as usize * w + x as usize] != 0
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(x, y) && !(fg(x - 1, y) && fg(x + 1, y) && fg(x, y - 1) && fg(x, y + 1)) {
                out.push(mask.grid().index_to_physical(x as f64, y as f64));
            }
        }
    }
    out
}

fn directed(from: &[Point2], to: &[Point2]) -> f64 {
    let mut worst = 0.0f64;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Symmetric Hausdorff distance (mm) between the prostate boundaries of two
/// masks on the same grid.
pub fn hausdorff_boundary(a: &LabelMask2D, b: &LabelMask2D) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "hausdorff")?;
    let pa = boundary_points(a);
    let pb = boundary_points(b);
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::EmptyRegion("hausdorff_boundary needs two nonempty masks".into()));
    }
    Ok(directed(&pa, &pb).max(directed(&pb, &pa)))
}

/// Mean Euclidean distance over landmarks matched by label, slice by slice.
/// Both sides must already live in the same (MRI) space. Returns the mean and
/// the number of matched pairs.
pub fn landmark_deviation(lh: &[PointSet2D], lm: &[PointSet2D]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (h, m) in lh.iter().zip(lm) {
        for p in &h.points {
            if let Some(q) = m.get(&p.label) {
                total += (p.x_mm - q.x_mm).hypot(p.y_mm - q.y_mm);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion("no matched landmark pairs".into()));
    }
    Ok((total / n as f64, n))
}

/// Mean distance between urethra centres of mass over slices annotated on
/// both sides. Returns the mean, the number of qualifying slices and the
/// number skipped.
pub fn urethra_deviation(uh: &[LabelMask2D], um: &[LabelMask2D]) -> Result<(f64, usize, usize)> {
    if uh.len() != um.len() {
        return Err(Error::InvalidArgument(format!(
            "urethra_deviation: {} slices vs {}",
            uh.len(),
            um.len()
        )));
    }
    let mut total = 0.0;
    let (mut used, mut skipped) = (0usize, 0usize);
    for (h, m) in uh.iter().zip(um) {
        if h.foreground_count() == 0 || m.foreground_count() == 0 {
            skipped += 1;
            continue;
        }
        let a = center_of_mass(&h.foreground(), 1)?;
        let b = center_of_mass(&m.foreground(), 1)?;
        total += (a[0] - b[0]).hypot(a[1] - b[1]);
        used += 1;
    }
    if used == 0 {
        return Err(Error::EmptyRegion("no slice has urethra annotations on both sides".into()));
    }
    Ok((total / used as f64, used, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `min(u_a, u_b)`.
    pub u: f64,
    pub u_a: f64,
    pub u_b: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Two-sided Mann-Whitney U test: midranks for ties, normal approximation
/// with tie-corrected variance and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("mann_whitney_u needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("mann_whitney_u: non-finite sample".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_a += all[i..=j].iter().filter(|e| e.1).count() as f64 * mid;
        i = j + 1;
    }
    let u_a = rank_a - na * (na + 1.0) / 2.0;
    let u_b = na * nb - u_a;
    let nt = n as f64;
    let mean = na * nb / 2.0;
    let var = if nt > 1.0 {
        na * nb / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0)))
    } else {
        0.0
    };
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(MannWhitney { u: u_a.min(u_b), u_a, u_b, p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetric {
    pub slice: usize,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hausdorff_mm: Option<f64>,
}

/// How per-slice Hausdorff distances are folded into one case value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffAggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_id: String,
    pub per_slice: Vec<SliceMetric>,
    pub dice: f64,
    pub hausdorff_mm: Option<f64>,
    pub landmark_dev_mm: Option<f64>,
    pub urethra_dev_mm: Option<f64>,
    pub n_slices: usize,
    pub n_landmarks: usize,
    pub n_urethra_slices: usize,
}

/// Inputs for [`MetricReport::compute`]; all masks on the MRI grid.
pub struct CaseMasks<'a> {
    pub mri_prostate: &'a [LabelMask2D],
    pub mapped_prostate: &'a [LabelMask2D],
    pub mri_urethra: Option<&'a [LabelMask2D]>,
    pub mapped_urethra: Option<&'a [LabelMask2D]>,
    pub mri_landmarks: Option<&'a [PointSet2D]>,
    pub mapped_landmarks: Option<&'a [PointSet2D]>,
}

impl MetricReport {
    pub fn compute(case_id: &str, m: &CaseMasks<'_>, agg: HausdorffAggregation) -> Result<Self> {
        if m.mri_prostate.len() != m.mapped_prostate.len() || m.mri_prostate.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "metric report: {} reference slices vs {} mapped",
                m.mri_prostate.len(),
                m.mapped_prostate.len()
            )));
        }
        let mut per_slice = Vec::with_capacity(m.mri_prostate.len());
        for (k, (a, b)) in m.mri_prostate.iter().zip(m.mapped_prostate).enumerate() {
            let d = dice(a, b, 1)?;
            let h = if a.foreground_count() > 0 && b.foreground_count() > 0 {
                Some(hausdorff_boundary(a, b)?)
            } else {
                None
            };
            per_slice.push(SliceMetric { slice: k, dice: d, hausdorff_mm: h });
        }
        let fa: Vec<LabelMask2D> = m.mri_prostate.iter().map(|x| x.foreground()).collect();
        let fb: Vec<LabelMask2D> = m.mapped_prostate.iter().map(|x| x.foreground()).collect();
        let dice_mean = dice_case(&fa, &fb, 1)?;
        let hs: Vec<f64> = per_slice.iter().filter_map(|s| s.hausdorff_mm).collect();
        let hausdorff_mm = if hs.is_empty() {
            None
        } else {
            Some(match agg {
                HausdorffAggregation::Mean => hs.iter().sum::<f64>() / hs.len() as f64,
                HausdorffAggregation::Max => hs.iter().copied().fold(0.0, f64::max),
            })
        };
        let (urethra_dev_mm, n_urethra_slices) = match (m.mri_urethra, m.mapped_urethra) {
            (Some(a), Some(b)) => match urethra_deviation(a, b) {
                Ok((d, n, _)) => (Some(d), n),
                Err(Error::EmptyRegion(_)) => (None, 0),
                Err(e) => return Err(e),
            },
            _ => (None, 0),
        };
        let (landmark_dev_mm, n_landmarks) = match (m.mri_landmarks, m.mapped_landmarks) {
            (Some(a), Some(b)) => match landmark_deviation(a, b) {
                Ok((d, n)) => (Some(d), n),
                Err(Error::EmptyRegion(_)) => (None, 0),
                Err(e) => return Err(e),
            },
            _ => (None, 0),
        };
        Ok(MetricReport {
            case_id: case_id.to_string(),
            n_slices: per_slice.len(),
            per_slice,
            dice: dice_mean,
            hausdorff_mm,
            landmark_dev_mm,
            urethra_dev_mm,
            n_landmarks,
            n_urethra_slices,
        })
    }

    pub fn csv_row(&self) -> MetricRow {
        MetricRow {
            case_id: self.case_id.clone(),
            dice: self.dice,
            hausdorff_mm: self.hausdorff_mm,
            urethra_dev_mm: self.urethra_dev_mm,
            landmark_dev_mm: self.landmark_dev_mm,
            n_slices: self.n_slices,
            n_landmarks: self.n_landmarks,
        }
    }
}

/// One CSV line per case. Missing quantities are written as empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub case_id: String,
    pub dice: f64,
    pub hausdorff_mm: Option<f64>,
    pub urethra_dev_mm: Option<f64>,
    pub landmark_dev_mm: Option<f64>,
    pub n_slices: usize,
    pub n_landmarks: usize,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
    Ok(rows)
}
