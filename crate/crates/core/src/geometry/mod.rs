//! Oriented-box geometry shared by every stage: boxes, proposals, planar
//! poses, rotated bird's-eye-view IoU, point-in-box queries and greedy NMS.

mod nms;
pub mod polygon;
mod pose;

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use nms::{nms, nms_indices};
use polygon::{clip_convex, signed_area, Point2};
pub use pose::{transform_points, PoseSE3};

pub type Point3 = [f64; 3];

/// Intersections below this area (m²) count as no overlap.
pub const MIN_OVERLAP_AREA: f64 = 1e-12;

/// Wraps an angle into (−π, π].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = yaw.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameId(pub u32);

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Oriented 3D box: center, extents (`l` along the heading) and yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    /// Validates extents and normalizes yaw.
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Result<Self> {
        let all = [cx, cy, cz, l, w, h, yaw];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite box {all:?}")));
        }
        if l <= 0.0 || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "box extents must be positive, got l={l} w={w} h={h}"
            )));
        }
        Ok(Self {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn center(&self) -> Point3 {
        [self.cx, self.cy, self.cz]
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    /// BEV distance of the center from the frame origin.
    pub fn range(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [Point2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| {
            [self.cx + c * x - s * y, self.cy + s * x + c * y]
        })
    }

    /// Expresses an ego-frame point in box-local coordinates (heading along +x).
    #[inline]
    pub fn to_local(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    #[inline]
    pub fn contains(&self, p: Point3) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= 0.5 * self.l && q[1].abs() <= 0.5 * self.w && q[2].abs() <= 0.5 * self.h
    }

    #[inline]
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let q = self.to_local([x, y, self.cz]);
        q[0].abs() <= 0.5 * self.l && q[1].abs() <= 0.5 * self.w
    }

    /// Pose mapping box-local coordinates into the box's parent frame.
    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::new(self.cx, self.cy, self.cz, self.yaw)
    }

    fn bounding_radius(&self) -> f64 {
        0.5 * self.l.hypot(self.w)
    }

    fn total_cmp(&self, other: &Box3D) -> Ordering {
        let a = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw];
        let b = [other.cx, other.cy, other.cz, other.l, other.w, other.h, other.yaw];
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub confidence: f64,
}

impl Proposal {
    pub fn new(bbox: Box3D, confidence: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&confidence), "confidence {confidence}");
        Self { bbox, confidence }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Ego,
    Multi,
}

impl View {
    pub fn as_str(&self) -> &'static str {
        match self {
            View::Ego => "ego",
            View::Multi => "multi",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ego" => Ok(View::Ego),
            "multi" => Ok(View::Multi),
            other => Err(Error::InvalidInput(format!("unknown view '{other}'"))),
        }
    }
}

/// Proposals of one frame and view, all expressed in the ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub frame_id: FrameId,
    pub view: View,
    pub items: Vec<Proposal>,
}

impl ProposalSet {
    pub fn new(frame_id: FrameId, view: View, items: Vec<Proposal>) -> Self {
        Self {
            frame_id,
            view,
            items,
        }
    }

    pub fn empty(frame_id: FrameId, view: View) -> Self {
        Self::new(frame_id, view, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn boxes(&self) -> impl Iterator<Item = &Box3D> + '_ {
        self.items.iter().map(|p| &p.bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub source_agent: usize,
}

impl PointCloud {
    pub fn new(source_agent: usize, points: Vec<Point3>) -> Self {
        Self {
            points,
            source_agent,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }
}

/// Bird's-eye-view IoU of two oriented boxes via convex clipping of their
/// footprints. Exactly symmetric in its arguments.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = if a.total_cmp(b).is_gt() { (b, a) } else { (a, b) };
    let area_a = a.bev_area();
    let area_b = b.bev_area();
    if area_a <= MIN_OVERLAP_AREA || area_b <= MIN_OVERLAP_AREA {
        return 0.0;
    }
    let reach = a.bounding_radius() + b.bounding_radius();
    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let inter = signed_area(&clip_convex(&a.bev_corners(), &b.bev_corners()));
    if inter <= MIN_OVERLAP_AREA {
        return 0.0;
    }
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

/// Indices of the points inside `bbox` (footprint and vertical slab, inclusive).
pub fn points_in_box(cloud: &PointCloud, bbox: &Box3D) -> (usize, Vec<usize>) {
    let indices: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| bbox.contains(**p))
        .map(|(i, _)| i)
        .collect();
    (indices.len(), indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(cx: f64, cy: f64) -> Box3D {
        Box3D::new(cx, cy, 0.5, 1.0, 1.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn yaw_normalization_range() {
        assert_eq!(normalize_yaw(PI), PI);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-15);
        assert!((normalize_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn box_rejects_non_positive_extents() {
        assert!(Box3D::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(Box3D::new(0.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn iou_identical_is_one() {
        let b = Box3D::new(3.0, -2.0, 0.8, 4.5, 1.9, 1.6, 0.7).unwrap();
        assert!((rotated_iou_bev(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_far_apart_is_zero() {
        assert_eq!(rotated_iou_bev(&unit(0.0, 0.0), &unit(100.0, 0.0)), 0.0);
    }

    #[test]
    fn iou_half_offset_is_one_third() {
        let v = rotated_iou_bev(&unit(0.0, 0.0), &unit(0.5, 0.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn iou_touching_edges_is_zero() {
        assert_eq!(rotated_iou_bev(&unit(0.0, 0.0), &unit(1.0, 0.0)), 0.0);
    }

    #[test]
    fn points_in_box_basics() {
        let b = Box3D::new(1.0, 1.0, 1.0, 2.0, 1.0, 2.0, 0.3).unwrap();
        let empty = PointCloud::default();
        assert_eq!(points_in_box(&empty, &b).0, 0);
        let single = PointCloud::new(0, vec![b.center()]);
        assert_eq!(points_in_box(&single, &b), (1, vec![0]));
        let above = PointCloud::new(0, vec![[1.0, 1.0, 2.5]]);
        assert_eq!(points_in_box(&above, &b).0, 0);
    }
}
