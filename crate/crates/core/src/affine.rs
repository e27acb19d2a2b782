//! Similarity transforms, landmark fitting, and the mapping from an
//! alignment policy to its template.
//!
//! Aligning a face directly to the landmarks of policy `p` is the same as
//! aligning it to the base canvas template and then applying the policy's
//! scale-and-shift transform. [`policy_transform`] is that transform, and
//! [`estimate_similarity`] is the least-squares fit both paths rely on.

use std::ops::{Index, Mul};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{policy_to_box, AlignmentPolicy, GeometryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AffineError {
    #[error("landmark sets differ in length ({src} vs {dst})")]
    CountMismatch { src: usize, dst: usize },
    #[error("at least 2 landmarks are required, got {0}")]
    TooFewPoints(usize),
    #[error("landmark coordinates must be finite")]
    NonFinite,
    #[error("source landmarks are all coincident")]
    DegenerateSource,
    #[error("target landmarks collapse to a single point; no similarity maps onto them")]
    DegenerateTarget,
    #[error("base template: {0}")]
    InvalidTemplate(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

impl From<Point2> for (f64, f64) {
    fn from(p: Point2) -> Self {
        (p.x, p.y)
    }
}

/// Ordered landmark coordinates, at least two and all finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct LandmarkSet(Vec<Point2>);

impl LandmarkSet {
    pub fn new(points: Vec<Point2>) -> Result<Self, AffineError> {
        if points.len() < 2 {
            return Err(AffineError::TooFewPoints(points.len()));
        }
        if !points.iter().all(Point2::is_finite) {
            return Err(AffineError::NonFinite);
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[Point2] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.0.len() as f64;
        let (sx, sy) = self.0.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point2::new(sx / n, sy / n)
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> LandmarkSet {
        LandmarkSet(self.0.iter().map(|p| t.apply(*p)).collect())
    }
}

impl TryFrom<Vec<Point2>> for LandmarkSet {
    type Error = AffineError;

    fn try_from(points: Vec<Point2>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<LandmarkSet> for Vec<Point2> {
    fn from(set: LandmarkSet) -> Self {
        set.0
    }
}

impl Index<usize> for LandmarkSet {
    type Output = Point2;

    fn index(&self, i: usize) -> &Point2 {
        &self.0[i]
    }
}

/// Conformal map `[[a, -b, tx], [b, a, ty]]` acting on column points:
/// uniform scale, rotation and translation, never a reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SimilarityTransform {
    pub const IDENTITY: Self = Self { a: 1.0, b: 0.0, tx: 0.0, ty: 0.0 };

    pub const fn new(a: f64, b: f64, tx: f64, ty: f64) -> Self {
        Self { a, b, tx, ty }
    }

    pub fn from_scale_rotation(scale: f64, radians: f64, tx: f64, ty: f64) -> Self {
        Self::new(scale * radians.cos(), scale * radians.sin(), tx, ty)
    }

    pub fn scaling(s: f64) -> Self {
        Self::new(s, 0.0, 0.0, 0.0)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(1.0, 0.0, tx, ty)
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    /// Determinant of the linear part, `a² + b²`.
    pub fn determinant(&self) -> f64 {
        self.a * self.a + self.b * self.b
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        Point2::new(self.a * p.x - self.b * p.y + self.tx, self.b * p.x + self.a * p.y + self.ty)
    }

    /// Panics only if the transform has zero scale, which the constructors
    /// in this crate never produce.
    pub fn inverse(&self) -> Self {
        let det = self.determinant();
        assert!(det > 0.0, "similarity transform with zero scale has no inverse");
        let (a, b) = (self.a / det, -self.b / det);
        // x = R⁻¹(y - t)
        Self::new(a, b, -(a * self.tx - b * self.ty), -(b * self.tx + a * self.ty))
    }

    /// Row-major 2×3 matrix.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.a, -self.b, self.tx], [self.b, self.a, self.ty]]
    }

    pub fn max_param_diff(&self, other: &Self) -> f64 {
        [self.a - other.a, self.b - other.b, self.tx - other.tx, self.ty - other.ty]
            .into_iter()
            .map(f64::abs)
            .fold(0.0, f64::max)
    }
}

/// `outer ∘ inner`: apply `inner` first, then `outer`.
pub fn compose(outer: &SimilarityTransform, inner: &SimilarityTransform) -> SimilarityTransform {
    let (a1, b1) = (outer.a, outer.b);
    let (a2, b2) = (inner.a, inner.b);
    SimilarityTransform::new(
        a1 * a2 - b1 * b2,
        a1 * b2 + b1 * a2,
        a1 * inner.tx - b1 * inner.ty + outer.tx,
        b1 * inner.tx + a1 * inner.ty + outer.ty,
    )
}

impl Mul for SimilarityTransform {
    type Output = SimilarityTransform;

    fn mul(self, inner: SimilarityTransform) -> SimilarityTransform {
        compose(&self, &inner)
    }
}

/// Least-squares similarity transform taking `src` onto `dst`.
///
/// Closed-form solution over centred coordinates. Because the model is
/// `a, b` rather than a free 2×2 matrix, the fit can never reflect.
pub fn estimate_similarity(src: &LandmarkSet, dst: &LandmarkSet) -> Result<SimilarityTransform, AffineError> {
    if src.len() != dst.len() {
        return Err(AffineError::CountMismatch { src: src.len(), dst: dst.len() });
    }
    let cs = src.centroid();
    let cd = dst.centroid();

    let (mut norm, mut dot, mut cross) = (0.0, 0.0, 0.0);
    for (s, d) in src.points().iter().zip(dst.points()) {
        let (sx, sy) = (s.x - cs.x, s.y - cs.y);
        let (dx, dy) = (d.x - cd.x, d.y - cd.y);
        norm += sx * sx + sy * sy;
        dot += sx * dx + sy * dy;
        cross += sx * dy - sy * dx;
    }

    let spread = src.points().iter().map(|p| p.distance(&cs)).fold(0.0, f64::max);
    if norm == 0.0 || spread <= f64::EPSILON * (1.0 + cs.x.abs().max(cs.y.abs())) {
        return Err(AffineError::DegenerateSource);
    }
    let (a, b) = (dot / norm, cross / norm);
    if a == 0.0 && b == 0.0 {
        return Err(AffineError::DegenerateTarget);
    }
    Ok(SimilarityTransform::new(a, b, cd.x - (a * cs.x - b * cs.y), cd.y - (b * cs.x + a * cs.y)))
}

/// Landmark layout on the square alignment canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTemplate {
    pub canvas: i64,
    pub output_size: i64,
    pub landmarks: LandmarkSet,
}

impl Default for BaseTemplate {
    /// Five symmetric points (eyes, nose tip, mouth corners) on a 300 pixel
    /// canvas with the nose at the centre, cropped to 112 pixel outputs.
    fn default() -> Self {
        let pts = [(105.0, 125.0), (195.0, 125.0), (150.0, 150.0), (118.0, 190.0), (182.0, 190.0)];
        Self { canvas: 300, output_size: 112, landmarks: LandmarkSet(pts.into_iter().map(Point2::from).collect()) }
    }
}

impl BaseTemplate {
    /// Nose mid-point, always the canvas centre.
    pub fn anchor(&self) -> Point2 {
        let c = self.canvas as f64 / 2.0;
        Point2::new(c, c)
    }

    pub fn validate(&self) -> Result<(), AffineError> {
        if self.canvas <= 0 || self.output_size <= 0 {
            return Err(AffineError::InvalidTemplate("canvas and output size must be positive".into()));
        }
        let mid = self.anchor().x;
        let pts = self.landmarks.points();
        for p in pts {
            let mirror = Point2::new(2.0 * mid - p.x, p.y);
            if !pts.iter().any(|q| q.distance(&mirror) <= 1e-9) {
                return Err(AffineError::InvalidTemplate(format!(
                    "landmark ({}, {}) has no mirror image about x = {mid}",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }

    /// The same template on a canvas `factor` times larger; policies scale
    /// by the same factor.
    pub fn scaled(&self, factor: i64) -> Self {
        let s = SimilarityTransform::scaling(factor as f64);
        Self { canvas: self.canvas * factor, output_size: self.output_size, landmarks: self.landmarks.transformed(&s) }
    }
}

/// Maps base-canvas coordinates into the `output_size²` frame of policy `p`:
/// scale `output_size / m`, then shift the crop box's corner to the origin.
pub fn policy_transform(p: AlignmentPolicy, base: &BaseTemplate) -> Result<SimilarityTransform, AffineError> {
    let b = policy_to_box(p, base.canvas)?;
    let k = base.output_size as f64 / b.side as f64;
    Ok(SimilarityTransform::new(k, 0.0, -(b.left as f64) * k, -(b.top as f64) * k))
}

/// Template landmarks of policy `p` in its output frame.
pub fn derive_template_landmarks(p: AlignmentPolicy, base: &BaseTemplate) -> Result<LandmarkSet, AffineError> {
    Ok(base.landmarks.transformed(&policy_transform(p, base)?))
}
