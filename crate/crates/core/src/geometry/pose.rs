use serde::{Deserialize, Serialize};

use super::{normalize_yaw, Box3D, Point3, PointCloud};
use crate::error::{Error, Result};

/// Planar rigid transform: rotation about +z followed by a 3D translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub translation: [f64; 3],
    pub yaw: f64,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub const fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            yaw: 0.0,
        }
    }

    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self {
            translation: [x, y, z],
            yaw,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.yaw.is_finite() && self.translation.iter().all(|v| v.is_finite())
    }

    #[inline]
    pub fn apply(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
            p[2] + self.translation[2],
        ]
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let t = self.apply(other.translation);
        PoseSE3 {
            translation: t,
            yaw: self.yaw + other.yaw,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let (s, c) = self.yaw.sin_cos();
        let [tx, ty, tz] = self.translation;
        PoseSE3 {
            translation: [-(c * tx + s * ty), s * tx - c * ty, -tz],
            yaw: -self.yaw,
        }
    }

    /// Maps a box through the transform; extents are unchanged.
    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let [cx, cy, cz] = self.apply([b.cx, b.cy, b.cz]);
        Box3D {
            cx,
            cy,
            cz,
            l: b.l,
            w: b.w,
            h: b.h,
            yaw: normalize_yaw(b.yaw + self.yaw),
        }
    }
}

/// Maps every point of `cloud` through `pose`, keeping order and source agent.
pub fn transform_points(cloud: &PointCloud, pose: &PoseSE3) -> Result<PointCloud> {
    if !pose.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite pose {pose:?}")));
    }
    Ok(PointCloud {
        points: cloud.points.iter().map(|&p| pose.apply(p)).collect(),
        source_agent: cloud.source_agent,
    })
}
