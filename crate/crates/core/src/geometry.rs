//! Policy-space arithmetic over the aligned face canvas.
//!
//! An [`AlignmentPolicy`] `{m, delta}` selects a square crop of side `m`
//! that is horizontally centred on the canvas and whose vertical centre sits
//! `delta` pixels below the canvas centre (image y grows downward). All
//! coordinates are integers; the search grid never produces fractional
//! policies.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("crop size {m} must be positive")]
    NonPositiveSize { m: i64 },
    #[error("crop size {m} exceeds canvas {canvas}")]
    CropLargerThanCanvas { m: i64, canvas: i64 },
    #[error("crop box of policy {policy} lies outside the {canvas}x{canvas} canvas")]
    OutsideCanvas { policy: AlignmentPolicy, canvas: i64 },
    #[error("policy {policy} is not centred on the pixel grid of a {canvas} canvas (canvas - m must be even)")]
    OffPixelGrid { policy: AlignmentPolicy, canvas: i64 },
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("crop boxes of {0} and {1} do not intersect")]
    DisjointParents(AlignmentPolicy, AlignmentPolicy),
}

/// Crop size `m` and vertical shift `delta`, both in canvas pixels.
///
/// Serialized as the two-element array `[m, delta]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(i64, i64)", into = "(i64, i64)")]
pub struct AlignmentPolicy {
    pub m: i64,
    pub delta: i64,
}

impl AlignmentPolicy {
    pub const fn new(m: i64, delta: i64) -> Self {
        Self { m, delta }
    }
}

impl From<(i64, i64)> for AlignmentPolicy {
    fn from((m, delta): (i64, i64)) -> Self {
        Self { m, delta }
    }
}

impl From<AlignmentPolicy> for (i64, i64) {
    fn from(p: AlignmentPolicy) -> Self {
        (p.m, p.delta)
    }
}

impl fmt::Display for AlignmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}, {}}}", self.m, self.delta)
    }
}

/// Axis-aligned rectangle with integer pixel coordinates.
///
/// Zero width or height is allowed; such a rectangle is degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub left: i64,
    pub top: i64,
    pub width: i64,
    pub height: i64,
}

impl Rect {
    pub const fn new(left: i64, top: i64, width: i64, height: i64) -> Self {
        Self { left, top, width, height }
    }

    pub fn right(&self) -> i64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> i64 {
        self.top + self.height
    }

    pub fn area(&self) -> i64 {
        self.width.max(0) * self.height.max(0)
    }

    /// Overlap of two rectangles, or `None` when they share no area.
    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let left = self.left.max(other.left);
        let top = self.top.max(other.top);
        let right = self.right().min(other.right());
        let bottom = self.bottom().min(other.bottom());
        (right > left && bottom > top).then(|| Rect::new(left, top, right - left, bottom - top))
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.left >= self.left
            && other.top >= self.top
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Twice the centre coordinates, kept integral.
    fn doubled_center(&self) -> (i64, i64) {
        (2 * self.left + self.width, 2 * self.top + self.height)
    }
}

/// Square crop region `[left, top, side, side]` on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropBox {
    pub left: i64,
    pub top: i64,
    pub side: i64,
}

impl CropBox {
    pub const fn new(left: i64, top: i64, side: i64) -> Self {
        Self { left, top, side }
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.left, self.top, self.side, self.side)
    }
}

impl From<CropBox> for Rect {
    fn from(b: CropBox) -> Self {
        b.rect()
    }
}

/// Crop box selected by `p` on a square canvas of side `canvas`.
pub fn policy_to_box(p: AlignmentPolicy, canvas: i64) -> Result<CropBox, GeometryError> {
    if p.m <= 0 {
        return Err(GeometryError::NonPositiveSize { m: p.m });
    }
    if p.m > canvas {
        return Err(GeometryError::CropLargerThanCanvas { m: p.m, canvas });
    }
    if (canvas - p.m) % 2 != 0 {
        return Err(GeometryError::OffPixelGrid { policy: p, canvas });
    }
    let left = (canvas - p.m) / 2;
    let top = left + p.delta;
    if top < 0 || top + p.m > canvas {
        return Err(GeometryError::OutsideCanvas { policy: p, canvas });
    }
    Ok(CropBox::new(left, top, p.m))
}

/// Intersection and union areas of two rectangles.
///
/// Kept as an exact integer pair so callers can compare ratios without
/// rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: i64,
    pub union: i64,
}

impl Overlap {
    pub fn of(a: &Rect, b: &Rect) -> Self {
        let intersection = a.intersection(b).map_or(0, |r| r.area());
        Self { intersection, union: a.area() + b.area() - intersection }
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// Exact comparison of two ratios by cross-multiplication. A zero union
    /// ranks as ratio zero.
    pub fn cmp_ratio(&self, other: &Overlap) -> Ordering {
        let lhs = self.intersection as i128 * other.union.max(1) as i128;
        let rhs = other.intersection as i128 * self.union.max(1) as i128;
        lhs.cmp(&rhs)
    }
}

/// Intersection over union of two rectangles.
///
/// A zero-area rectangle scores 0 against anything except an identical
/// degenerate rectangle, which scores 1.
pub fn box_iou(a: impl Into<Rect>, b: impl Into<Rect>) -> f64 {
    let (a, b) = (a.into(), b.into());
    if a == b {
        return 1.0;
    }
    Overlap::of(&a, &b).iou()
}

/// Bounds and steps of the discrete `{m, delta}` grid on a square canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub m_min: i64,
    pub m_max: i64,
    pub s_m: i64,
    pub delta_min: i64,
    pub delta_max: i64,
    pub s_delta: i64,
    pub canvas: i64,
}

impl Default for SearchSpace {
    /// The 93-candidate space: m in 160..=232 step 8, delta in -32..=24
    /// step 4, on a 300 pixel canvas.
    fn default() -> Self {
        Self { m_min: 160, m_max: 232, s_m: 8, delta_min: -32, delta_max: 24, s_delta: 4, canvas: 300 }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidSpace(msg));
        if self.s_m <= 0 || self.s_delta <= 0 {
            return bad(format!("steps must be positive (s_m={}, s_delta={})", self.s_m, self.s_delta));
        }
        if self.m_min <= 0 || self.m_min > self.m_max {
            return bad(format!("need 0 < m_min <= m_max (got {}..{})", self.m_min, self.m_max));
        }
        if self.delta_min > self.delta_max {
            return bad(format!("need delta_min <= delta_max (got {}..{})", self.delta_min, self.delta_max));
        }
        if (self.m_max - self.m_min) % self.s_m != 0 {
            return bad("m_max - m_min must be a multiple of s_m".into());
        }
        if (self.delta_max - self.delta_min) % self.s_delta != 0 {
            return bad("delta_max - delta_min must be a multiple of s_delta".into());
        }
        if self.delta_min > 0 || self.delta_max < 0 || self.delta_min % self.s_delta != 0 {
            return bad("delta = 0 must lie on the delta grid".into());
        }
        if (self.canvas - self.m_min) % 2 != 0 || self.s_m % 2 != 0 {
            return bad("every crop size must have canvas - m even so boxes sit on whole pixels".into());
        }
        policy_to_box(self.super_roi(), self.canvas)?;
        Ok(())
    }

    /// The maximal policy `{m_max, 0}`.
    pub fn super_roi(&self) -> AlignmentPolicy {
        AlignmentPolicy::new(self.m_max, 0)
    }

    pub fn super_roi_box(&self) -> CropBox {
        let left = (self.canvas - self.m_max) / 2;
        CropBox::new(left, left, self.m_max)
    }

    pub fn m_values(&self) -> impl Iterator<Item = i64> + '_ {
        (self.m_min..=self.m_max).step_by(self.s_m as usize)
    }

    pub fn delta_values(&self) -> impl Iterator<Item = i64> + '_ {
        (self.delta_min..=self.delta_max).step_by(self.s_delta as usize)
    }

    /// Closed interval of delta grid values whose box stays inside the
    /// SuperROI box for crop size `m` (which must be within bounds).
    pub fn delta_range_for(&self, m: i64) -> (i64, i64) {
        let slack = (self.m_max - m) / 2;
        let lo = self.delta_min.max(-slack);
        let hi = self.delta_max.min(slack);
        (snap_toward_zero(lo, self.s_delta), snap_toward_zero(hi, self.s_delta))
    }

    pub fn contains(&self, p: AlignmentPolicy) -> bool {
        let on_grid =
            p.m >= self.m_min && p.m <= self.m_max && (p.m - self.m_min) % self.s_m == 0 && p.delta % self.s_delta == 0;
        if !on_grid {
            return false;
        }
        let (lo, hi) = self.delta_range_for(p.m);
        p.delta >= lo && p.delta <= hi
    }
}

/// Rounds `v` to a multiple of `step`, moving toward zero.
fn snap_toward_zero(v: i64, step: i64) -> i64 {
    (v / step) * step
}

/// Every grid policy whose box lies inside the SuperROI box, ordered by
/// ascending `m` then ascending `delta`.
pub fn enumerate_space(space: &SearchSpace) -> Vec<AlignmentPolicy> {
    let outer = space.super_roi_box().rect();
    space
        .m_values()
        .flat_map(|m| space.delta_values().map(move |d| AlignmentPolicy::new(m, d)))
        .filter(|&p| policy_to_box(p, space.canvas).is_ok_and(|b| outer.contains(&b.rect())))
        .collect()
}

/// Clamps `m` into bounds, then `delta` into the SuperROI containment
/// interval for that `m`. Off-grid values are snapped (m to the nearest
/// grid value, delta toward zero).
pub fn clip_policy(p: AlignmentPolicy, space: &SearchSpace) -> AlignmentPolicy {
    let m = p.m.clamp(space.m_min, space.m_max);
    let k = ((m - space.m_min) as f64 / space.s_m as f64).round() as i64;
    let m = space.m_min + k * space.s_m;
    let (lo, hi) = space.delta_range_for(m);
    let delta = snap_toward_zero(p.delta.clamp(lo, hi), space.s_delta);
    AlignmentPolicy::new(m, delta)
}

/// Which parent's state the crossover child inherits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParentIndex {
    First,
    Second,
}

impl ParentIndex {
    pub fn as_number(self) -> u8 {
        match self {
            ParentIndex::First => 1,
            ParentIndex::Second => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crossover {
    pub policy: AlignmentPolicy,
    pub parent: ParentIndex,
    /// Intersection of the two parent boxes.
    pub intersection: Rect,
}

/// A crossover parent: its policy and, if known, its latest validation
/// accuracy (used only to break ties).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parent {
    pub policy: AlignmentPolicy,
    pub val_acc: Option<f64>,
}

impl Parent {
    pub fn new(policy: AlignmentPolicy, val_acc: Option<f64>) -> Self {
        Self { policy, val_acc }
    }
}

impl From<AlignmentPolicy> for Parent {
    fn from(policy: AlignmentPolicy) -> Self {
        Self { policy, val_acc: None }
    }
}

/// Intersection-based crossover.
///
/// The child is the candidate whose box has the largest IOU with the
/// intersection of the parents' boxes. IOU ties go to the candidate whose
/// box centre is nearest the intersection centre, then to the earliest
/// candidate in enumeration order. The inherited parent is the one whose
/// box has larger IOU with the child's box; ties go to the parent with the
/// higher accuracy, then to the first parent.
pub fn intersection_crossover(
    first: impl Into<Parent>,
    second: impl Into<Parent>,
    space: &SearchSpace,
) -> Result<Crossover, GeometryError> {
    let candidates = enumerate_space(space);
    intersection_crossover_over(first.into(), second.into(), space, &candidates)
}

/// [`intersection_crossover`] against a pre-enumerated candidate list.
pub fn intersection_crossover_over(
    first: Parent,
    second: Parent,
    space: &SearchSpace,
    candidates: &[AlignmentPolicy],
) -> Result<Crossover, GeometryError> {
    let a1 = policy_to_box(first.policy, space.canvas)?.rect();
    let a2 = policy_to_box(second.policy, space.canvas)?.rect();
    let shared = a1.intersection(&a2).ok_or(GeometryError::DisjointParents(first.policy, second.policy))?;
    let (cx, cy) = shared.doubled_center();

    let mut best: Option<(AlignmentPolicy, Overlap, i64)> = None;
    for &p in candidates {
        let rect = policy_to_box(p, space.canvas)?.rect();
        let overlap = Overlap::of(&rect, &shared);
        let (bx, by) = rect.doubled_center();
        let dist = (bx - cx).pow(2) + (by - cy).pow(2);
        let better = match &best {
            None => true,
            Some((_, o, d)) => match overlap.cmp_ratio(o) {
                Ordering::Greater => true,
                Ordering::Equal => dist < *d,
                Ordering::Less => false,
            },
        };
        if better {
            best = Some((p, overlap, dist));
        }
    }
    let (policy, _, _) = best.ok_or_else(|| GeometryError::InvalidSpace("search space has no candidates".into()))?;

    let child = policy_to_box(policy, space.canvas)?.rect();
    let to_first = Overlap::of(&child, &a1);
    let to_second = Overlap::of(&child, &a2);
    let parent = match to_first.cmp_ratio(&to_second) {
        Ordering::Greater => ParentIndex::First,
        Ordering::Less => ParentIndex::Second,
        Ordering::Equal => match (first.val_acc, second.val_acc) {
            (Some(v1), Some(v2)) if v2 > v1 => ParentIndex::Second,
            (None, Some(_)) => ParentIndex::Second,
            _ => ParentIndex::First,
        },
    };
    Ok(Crossover { policy, parent, intersection: shared })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(m: i64, d: i64) -> AlignmentPolicy {
        AlignmentPolicy::new(m, d)
    }

    #[test]
    fn boxes_are_centred_and_shifted_down() {
        assert_eq!(policy_to_box(p(232, 0), 300).unwrap(), CropBox::new(34, 34, 232));
        assert_eq!(policy_to_box(p(160, 0), 300).unwrap(), CropBox::new(70, 70, 160));
        assert_eq!(policy_to_box(p(192, 4), 300).unwrap(), CropBox::new(54, 58, 192));
    }

    #[test]
    fn box_rejects_oversized_and_escaping_policies() {
        assert_eq!(policy_to_box(p(302, 0), 300), Err(GeometryError::CropLargerThanCanvas { m: 302, canvas: 300 }));
        assert!(matches!(policy_to_box(p(232, 40), 300), Err(GeometryError::OutsideCanvas { .. })));
        assert!(matches!(policy_to_box(p(0, 0), 300), Err(GeometryError::NonPositiveSize { .. })));
        assert!(matches!(policy_to_box(p(231, 0), 300), Err(GeometryError::OffPixelGrid { .. })));
    }

    #[test]
    fn iou_examples() {
        let b = CropBox::new(54, 58, 192);
        assert_eq!(box_iou(b, b), 1.0);
        let b192 = policy_to_box(p(192, 4), 300).unwrap();
        let b200 = policy_to_box(p(200, 4), 300).unwrap();
        assert!((box_iou(b192, b200) - 36864.0 / 40000.0).abs() < 1e-15);
        let b160 = policy_to_box(p(160, 0), 300).unwrap();
        let b232 = policy_to_box(p(232, 0), 300).unwrap();
        assert!((box_iou(b160, b232) - 25600.0 / 53824.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_iou() {
        let flat = Rect::new(10, 10, 0, 5);
        assert_eq!(box_iou(flat, flat), 1.0);
        assert_eq!(box_iou(flat, Rect::new(10, 10, 0, 6)), 0.0);
        assert_eq!(box_iou(flat, Rect::new(0, 0, 50, 50)), 0.0);
        assert_eq!(box_iou(Rect::new(0, 0, 10, 10), Rect::new(20, 20, 10, 10)), 0.0);
    }

    #[test]
    fn default_space_has_93_candidates() {
        let space = SearchSpace::default();
        space.validate().unwrap();
        let all = enumerate_space(&space);
        assert_eq!(all.len(), 93);
        assert!(!all.contains(&p(232, 4)));
        assert_eq!(all.last(), Some(&p(232, 0)));
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_size_space_is_just_super_roi() {
        let space = SearchSpace { m_min: 232, ..SearchSpace::default() };
        assert_eq!(enumerate_space(&space), vec![p(232, 0)]);
    }

    #[test]
    fn clip_examples() {
        let space = SearchSpace::default();
        assert_eq!(clip_policy(p(240, 0), &space), p(232, 0));
        assert_eq!(clip_policy(p(232, 8), &space), p(232, 0));
        assert_eq!(clip_policy(p(168, -36), &space), p(168, -32));
        assert_eq!(clip_policy(p(176, -32), &space), p(176, -28));
        assert_eq!(clip_policy(p(100, 100), &space), p(160, 24));
    }

    #[test]
    fn invalid_spaces_are_rejected() {
        let base = SearchSpace::default();
        for bad in [
            SearchSpace { s_m: 0, ..base },
            SearchSpace { m_min: 240, ..base },
            SearchSpace { m_max: 236, ..base },
            SearchSpace { delta_min: 4, ..base },
            SearchSpace { delta_min: -30, delta_max: 26, s_delta: 4, ..base },
            SearchSpace { canvas: 200, ..base },
            SearchSpace { canvas: 301, ..base },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn crossover_nested_parents() {
        let space = SearchSpace::default();
        let c = intersection_crossover(p(192, 4), p(200, 4), &space).unwrap();
        assert_eq!(c.policy, p(192, 4));
        assert_eq!(c.parent, ParentIndex::First);
    }

    #[test]
    fn crossover_self_pair_prefers_more_accurate_parent() {
        let space = SearchSpace::default();
        let q = p(200, -8);
        let c = intersection_crossover(q, q, &space).unwrap();
        assert_eq!((c.policy, c.parent), (q, ParentIndex::First));
        let c = intersection_crossover(Parent::new(q, Some(0.5)), Parent::new(q, Some(0.6)), &space).unwrap();
        assert_eq!((c.policy, c.parent), (q, ParentIndex::Second));
    }

    #[test]
    fn crossover_extreme_shift_pair() {
        let space = SearchSpace::default();
        let c = intersection_crossover(p(160, -32), p(160, 24), &space).unwrap();
        assert_eq!(c.intersection, Rect::new(70, 94, 160, 104));
        assert_eq!(c.policy, p(160, -4));
        assert_eq!(c.parent, ParentIndex::First);
    }

    #[test]
    fn crossover_rejects_disjoint_custom_parents() {
        let space =
            SearchSpace { m_min: 20, m_max: 300, s_m: 8, delta_min: -136, delta_max: 136, s_delta: 136, canvas: 300 };
        let err = intersection_crossover(p(20, -136), p(20, 136), &space).unwrap_err();
        assert!(matches!(err, GeometryError::DisjointParents(..)));
    }
}
