//! 2D spatial transforms.
//!
//! Every transform maps a point of the fixed (MRI) physical space to the
//! moving (histology) physical space, which is the direction needed for
//! pull-style resampling. Composite stages are applied left to right.

mod bspline;

pub use bspline::{bspline_derivatives, bspline_weights, BSplineFFD2D, FfdSupport};

use serde::{Deserialize, Serialize};

use crate::{Error, Point2, Result};

/// `p -> a·p + b` with `a` row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearMap {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl LinearMap {
    pub const IDENTITY: LinearMap = LinearMap {
        a: [[1.0, 0.0], [0.0, 1.0]],
        b: [0.0, 0.0],
    };

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.b[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.b[1],
        ]
    }

    /// `other ∘ self`: apply `self` first.
    pub fn then(&self, other: &LinearMap) -> LinearMap {
        let m = mat_mul(&other.a, &self.a);
        let b = other.apply(self.b);
        LinearMap { a: m, b }
    }

    pub fn determinant(&self) -> f64 {
        det(&self.a)
    }
}

fn mat_mul(x: &[[f64; 2]; 2], y: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            x[0][0] * y[0][0] + x[0][1] * y[1][0],
            x[0][0] * y[0][1] + x[0][1] * y[1][1],
        ],
        [
            x[1][0] * y[0][0] + x[1][1] * y[1][0],
            x[1][0] * y[0][1] + x[1][1] * y[1][1],
        ],
    ]
}

fn mat_vec(m: &[[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

fn det(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub(crate) fn mat_inverse(m: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let d = det(m);
    let scale = m.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    if !d.is_finite() || d.abs() <= 1e-12 * scale * scale.max(1.0) {
        return Err(Error::SingularMatrix(d));
    }
    Ok([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]])
}

fn rotation(angle: f64) -> [[f64; 2]; 2] {
    let (s, c) = angle.sin_cos();
    [[c, -s], [s, c]]
}

/// `p' = R(angle)(p - center) + center + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    pub angle: f64,
    pub translation: [f64; 2],
    pub center: Point2,
}

impl RigidTransform2D {
    pub fn new(angle: f64, translation: [f64; 2], center: Point2) -> Self {
        RigidTransform2D { angle, translation, center }
    }

    pub fn identity() -> Self {
        Self::about(0.0, [0.0, 0.0])
    }

    /// Identity with a chosen rotation centre.
    pub fn about(angle: f64, center: Point2) -> Self {
        RigidTransform2D {
            angle,
            translation: [0.0, 0.0],
            center,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.angle.is_finite() && self.translation.iter().chain(&self.center).all(|v| v.is_finite())
    }

    pub fn linear_map(&self) -> LinearMap {
        AffineTransform2D::from(*self).linear_map()
    }

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        self.linear_map().apply(p)
    }

    pub fn inverse(&self) -> RigidTransform2D {
        let rt = rotation(-self.angle);
        let t = mat_vec(&rt, self.translation);
        RigidTransform2D {
            angle: -self.angle,
            translation: [-t[0], -t[1]],
            center: self.center,
        }
    }

    /// `(angle, tx, ty)`.
    pub fn parameters(&self) -> Vec<f64> {
        vec![self.angle, self.translation[0], self.translation[1]]
    }

    pub fn from_parameters(center: Point2, v: &[f64]) -> Result<Self> {
        check_len(3, v)?;
        Ok(RigidTransform2D::new(v[0], [v[1], v[2]], center))
    }
}

/// `p' = M(p - center) + center + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
    pub center: Point2,
}

impl From<RigidTransform2D> for AffineTransform2D {
    fn from(r: RigidTransform2D) -> Self {
        AffineTransform2D::new(rotation(r.angle), r.translation, r.center)
    }
}

impl AffineTransform2D {
    pub fn new(matrix: [[f64; 2]; 2], translation: [f64; 2], center: Point2) -> Self {
        AffineTransform2D {
            matrix,
            translation,
            center,
        }
    }

    pub fn identity() -> Self {
        Self::new(LinearMap::IDENTITY.a, [0.0, 0.0], [0.0, 0.0])
    }

    pub fn is_finite(&self) -> bool {
        self.matrix
            .iter()
            .flatten()
            .chain(&self.translation)
            .chain(&self.center)
            .all(|v| v.is_finite())
    }

    pub fn determinant(&self) -> f64 {
        det(&self.matrix)
    }

    /// Column norms of the matrix: the scale applied along each input axis.
    pub fn scales(&self) -> [f64; 2] {
        let m = &self.matrix;
        [m[0][0].hypot(m[1][0]), m[0][1].hypot(m[1][1])]
    }

    pub fn linear_map(&self) -> LinearMap {
        let mc = mat_vec(&self.matrix, self.center);
        LinearMap {
            a: self.matrix,
            b: [
                self.center[0] + self.translation[0] - mc[0],
                self.center[1] + self.translation[1] - mc[1],
            ],
        }
    }

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        self.linear_map().apply(p)
    }

    pub fn inverse(&self) -> Result<AffineTransform2D> {
        let mi = mat_inverse(&self.matrix)?;
        let t = mat_vec(&mi, self.translation);
        Ok(AffineTransform2D::new(mi, [-t[0], -t[1]], self.center))
    }

    /// Row-major matrix then translation.
    pub fn parameters(&self) -> Vec<f64> {
        let m = &self.matrix;
        vec![m[0][0], m[0][1], m[1][0], m[1][1], self.translation[0], self.translation[1]]
    }

    pub fn from_parameters(center: Point2, v: &[f64]) -> Result<Self> {
        check_len(6, v)?;
        Ok(AffineTransform2D::new([[v[0], v[1]], [v[2], v[3]]], [v[4], v[5]], center))
    }
}

/// Mirror about the vertical line `x = axis_x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipLR {
    pub axis_x: f64,
}

impl FlipLR {
    pub fn new(axis_x: f64) -> Self {
        FlipLR { axis_x }
    }

    pub fn linear_map(&self) -> LinearMap {
        LinearMap {
            a: [[-1.0, 0.0], [0.0, 1.0]],
            b: [2.0 * self.axis_x, 0.0],
        }
    }

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        [2.0 * self.axis_x - p[0], p[1]]
    }
}

/// Ordered chain of transforms; `stages[0]` is applied first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeTransform2D {
    stages: Vec<Transform2D>,
}

impl CompositeTransform2D {
    pub fn new(stages: Vec<Transform2D>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidArgument("composite transform needs at least one stage".into()));
        }
        Ok(CompositeTransform2D { stages })
    }

    pub fn stages(&self) -> &[Transform2D] {
        &self.stages
    }

    pub fn into_stages(self) -> Vec<Transform2D> {
        self.stages
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        self.stages.iter().fold(p, |q, t| t.apply(q))
    }
}

/// Closed set of transforms, serialised with a `kind` tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform2D {
    Rigid(RigidTransform2D),
    Affine(AffineTransform2D),
    Flip(FlipLR),
    Ffd(BSplineFFD2D),
    Composite(CompositeTransform2D),
}

impl From<RigidTransform2D> for Transform2D {
    fn from(t: RigidTransform2D) -> Self {
        Transform2D::Rigid(t)
    }
}

impl From<AffineTransform2D> for Transform2D {
    fn from(t: AffineTransform2D) -> Self {
        Transform2D::Affine(t)
    }
}

impl From<FlipLR> for Transform2D {
    fn from(t: FlipLR) -> Self {
        Transform2D::Flip(t)
    }
}

impl From<BSplineFFD2D> for Transform2D {
    fn from(t: BSplineFFD2D) -> Self {
        Transform2D::Ffd(t)
    }
}

impl From<CompositeTransform2D> for Transform2D {
    fn from(t: CompositeTransform2D) -> Self {
        Transform2D::Composite(t)
    }
}

impl Transform2D {
    pub fn identity() -> Self {
        Transform2D::Rigid(RigidTransform2D::identity())
    }

    /// Chain of stages, nested composites flattened. A single stage is
    /// returned unwrapped.
    pub fn chain(stages: impl IntoIterator<Item = Transform2D>) -> Result<Transform2D> {
        let mut flat = Vec::new();
        for s in stages {
            match s {
                Transform2D::Composite(c) => flat.extend(c.stages),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            return Ok(flat.pop().unwrap());
        }
        CompositeTransform2D::new(flat).map(Transform2D::Composite)
    }

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        match self {
            Transform2D::Rigid(t) => t.apply(p),
            Transform2D::Affine(t) => t.apply(p),
            Transform2D::Flip(t) => t.apply(p),
            Transform2D::Ffd(t) => t.apply(p),
            Transform2D::Composite(t) => t.apply(p),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Transform2D::Rigid(t) => t.is_finite(),
            Transform2D::Affine(t) => t.is_finite(),
            Transform2D::Flip(t) => t.axis_x.is_finite(),
            Transform2D::Ffd(t) => t.is_finite(),
            Transform2D::Composite(t) => t.stages.iter().all(|s| s.is_finite()),
        }
    }

    /// The equivalent `a·p + b` when no deformable stage is involved.
    pub fn linear_map(&self) -> Option<LinearMap> {
        match self {
            Transform2D::Rigid(t) => Some(t.linear_map()),
            Transform2D::Affine(t) => Some(t.linear_map()),
            Transform2D::Flip(t) => Some(t.linear_map()),
            Transform2D::Ffd(_) => None,
            Transform2D::Composite(c) => c
                .stages
                .iter()
                .try_fold(LinearMap::IDENTITY, |acc, s| s.linear_map().map(|m| acc.then(&m))),
        }
    }

    /// Inverse for the analytically invertible kinds.
    pub fn inverse(&self) -> Result<Transform2D> {
        match self {
            Transform2D::Rigid(t) => Ok(t.inverse().into()),
            Transform2D::Affine(t) => Ok(t.inverse()?.into()),
            Transform2D::Flip(t) => Ok((*t).into()),
            Transform2D::Ffd(_) => Err(Error::InvalidArgument(
                "free-form deformations have no closed-form inverse; use invert_point".into(),
            )),
            Transform2D::Composite(c) => {
                let inv = c.stages.iter().rev().map(|s| s.inverse()).collect::<Result<Vec<_>>>()?;
                Transform2D::chain(inv)
            }
        }
    }

    /// Solve `apply(p) = q` for `p`. FFD stages use Newton iteration.
    pub fn invert_point(&self, q: Point2) -> Result<Point2> {
        match self {
            Transform2D::Rigid(t) => Ok(t.inverse().apply(q)),
            Transform2D::Affine(t) => Ok(t.inverse()?.apply(q)),
            Transform2D::Flip(t) => Ok(t.apply(q)),
            Transform2D::Ffd(t) => t.invert_point(q),
            Transform2D::Composite(c) => c.stages.iter().rev().try_fold(q, |p, s| s.invert_point(p)),
        }
    }

    pub fn kind(&self) -> TransformKind {
        match self {
            Transform2D::Rigid(t) => TransformKind::Rigid { center: t.center },
            Transform2D::Affine(t) => TransformKind::Affine { center: t.center },
            Transform2D::Flip(_) => TransformKind::Flip,
            Transform2D::Ffd(t) => TransformKind::Ffd {
                grid_size: t.grid_size(),
                control_spacing: t.control_spacing(),
                domain_origin: t.domain_origin(),
            },
            Transform2D::Composite(c) => TransformKind::Composite(c.stages.iter().map(|s| s.kind()).collect()),
        }
    }

    /// Flat optimisation vector. Flips carry no parameters; composites
    /// concatenate their stages.
    pub fn parameters(&self) -> Vec<f64> {
        match self {
            Transform2D::Rigid(t) => t.parameters(),
            Transform2D::Affine(t) => t.parameters(),
            Transform2D::Flip(_) => Vec::new(),
            Transform2D::Ffd(t) => t.parameters(),
            Transform2D::Composite(c) => c.stages.iter().flat_map(|s| s.parameters()).collect(),
        }
    }

    pub fn from_parameters(kind: &TransformKind, v: &[f64]) -> Result<Transform2D> {
        check_len(kind.parameter_count(), v)?;
        Ok(match kind {
            TransformKind::Rigid { center } => RigidTransform2D::from_parameters(*center, v)?.into(),
            TransformKind::Affine { center } => AffineTransform2D::from_parameters(*center, v)?.into(),
            // A flip's mirror line is not an optimisation parameter.
            TransformKind::Flip => {
                return Err(Error::InvalidArgument("flip transforms cannot be rebuilt from parameters".into()))
            }
            TransformKind::Ffd {
                grid_size,
                control_spacing,
                domain_origin,
            } => BSplineFFD2D::from_parameters(*grid_size, *control_spacing, *domain_origin, v)?.into(),
            TransformKind::Composite(kinds) => {
                let mut stages = Vec::with_capacity(kinds.len());
                let mut at = 0;
                for k in kinds {
                    let n = k.parameter_count();
                    stages.push(Transform2D::from_parameters(k, &v[at..at + n])?);
                    at += n;
                }
                CompositeTransform2D::new(stages)?.into()
            }
        })
    }
}

/// Everything except the optimisable parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TransformKind {
    Rigid {
        center: Point2,
    },
    Affine {
        center: Point2,
    },
    Flip,
    Ffd {
        grid_size: [usize; 2],
        control_spacing: [f64; 2],
        domain_origin: Point2,
    },
    Composite(Vec<TransformKind>),
}

impl TransformKind {
    pub fn parameter_count(&self) -> usize {
        match self {
            TransformKind::Rigid { .. } => 3,
            TransformKind::Affine { .. } => 6,
            TransformKind::Flip => 0,
            TransformKind::Ffd { grid_size, .. } => 2 * grid_size[0] * grid_size[1],
            TransformKind::Composite(k) => k.iter().map(|k| k.parameter_count()).sum(),
        }
    }
}

fn check_len(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::ParameterLength { expected, got: v.len() })
    }
}
