//! Box-local geometric descriptors of a point crop.

use serde::{Deserialize, Serialize};

use crate::geometry::{Box3D, Point3};

/// Length of [`InstanceFeatures::to_vector`].
pub const FEATURE_DIM: usize = 12;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "log_point_count",
    "bev_extent_l",
    "bev_extent_w",
    "height_extent",
    "log_point_density",
    "pca_eigen_ratio_1",
    "pca_eigen_ratio_2",
    "mean_height_above_ground",
    "vertical_hist_0",
    "vertical_hist_1",
    "vertical_hist_2",
    "vertical_hist_3",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InstanceFeatures {
    /// ln(1 + n).
    pub point_count: f64,
    pub bev_extent_l: f64,
    pub bev_extent_w: f64,
    pub height_extent: f64,
    /// Points per m³ of the reference box.
    pub point_density: f64,
    pub pca_eigen_ratio_1: f64,
    pub pca_eigen_ratio_2: f64,
    /// Mean height above the reference box bottom.
    pub mean_height_above_ground: f64,
    /// Normalized point fractions over four equal slabs of the box height.
    pub vertical_histogram: [f64; 4],
}

impl InstanceFeatures {
    /// Computes features of `points` (parent-frame coordinates) relative to
    /// `reference`. Everything is measured in the box's own frame, so the result
    /// is invariant to rigid motions applied to both. Empty input yields zeros.
    pub fn compute(points: &[Point3], reference: &Box3D) -> Self {
        let local: Vec<Point3> = points.iter().map(|&p| reference.to_local(p)).collect();
        Self::from_local(&local, reference)
    }

    /// Same as [`compute`](Self::compute) for points already in box-local
    /// coordinates (center at the origin, heading along +x).
    pub fn from_local(local: &[Point3], reference: &Box3D) -> Self {
        if local.is_empty() {
            return Self::default();
        }
        let n = local.len() as f64;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut mean = [0.0; 3];
        for p in local {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
                mean[k] += p[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);

        let mut cov = [[0.0; 3]; 3];
        for p in local {
            let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] += d[i] * d[j];
                }
            }
        }
        cov.iter_mut().flatten().for_each(|c| *c /= n);
        let eig = symmetric_eigenvalues(cov);
        let total: f64 = eig.iter().sum();
        let (r1, r2) = if total > 1e-12 {
            (eig[0] / total, eig[1] / total)
        } else {
            (0.0, 0.0)
        };

        let half_h = 0.5 * reference.h;
        let mut hist = [0.0; 4];
        for p in local {
            let u = (p[2] + half_h) / reference.h;
            let bin = ((u * 4.0).floor().max(0.0) as usize).min(3);
            hist[bin] += 1.0;
        }
        hist.iter_mut().for_each(|b| *b /= n);

        Self {
            point_count: n.ln_1p(),
            bev_extent_l: hi[0] - lo[0],
            bev_extent_w: hi[1] - lo[1],
            height_extent: hi[2] - lo[2],
            point_density: n / (reference.l * reference.w * reference.h),
            pca_eigen_ratio_1: r1,
            pca_eigen_ratio_2: r2,
            mean_height_above_ground: mean[2] + half_h,
            vertical_histogram: hist,
        }
    }

    /// Model input vector; count and density enter log-scaled so all entries
    /// stay O(1).
    pub fn to_vector(&self) -> [f64; FEATURE_DIM] {
        let h = self.vertical_histogram;
        [
            self.point_count,
            self.bev_extent_l,
            self.bev_extent_w,
            self.height_extent,
            self.point_density.ln_1p(),
            self.pca_eigen_ratio_1,
            self.pca_eigen_ratio_2,
            self.mean_height_above_ground,
            h[0],
            h[1],
            h[2],
            h[3],
        ]
    }
}

/// Eigenvalues of a symmetric 3×3 matrix, descending (cyclic Jacobi).
pub fn symmetric_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..32 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
        }
    }
    let mut e = [a[0][0].max(0.0), a[1][1].max(0.0), a[2][2].max(0.0)];
    e.sort_by(|x, y| y.total_cmp(x));
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;

    #[test]
    fn empty_crop_is_all_zero() {
        let b = Box3D::new(0.0, 0.0, 1.0, 4.0, 2.0, 2.0, 0.0).unwrap();
        assert_eq!(InstanceFeatures::compute(&[], &b).to_vector(), [0.0; FEATURE_DIM]);
    }

    #[test]
    fn eigenvalues_of_diagonal_and_rotated() {
        let e = symmetric_eigenvalues([[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(e, [3.0, 2.0, 1.0]);
        // [[2,1,0],[1,2,0],[0,0,5]] has eigenvalues 5, 3, 1.
        let e = symmetric_eigenvalues([[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]]);
        for (x, y) in e.iter().zip([5.0, 3.0, 1.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_sums_to_one_and_ratios_descend() {
        let b = Box3D::new(2.0, 1.0, 1.0, 4.0, 2.0, 2.0, 0.4).unwrap();
        let pts: Vec<Point3> = (0..50)
            .map(|i| {
                let t = i as f64 / 49.0;
                b.pose().apply([2.0 * t - 1.0, 0.3 * (t * 7.0).sin(), t - 0.5])
            })
            .collect();
        let f = InstanceFeatures::compute(&pts, &b);
        let s: f64 = f.vertical_histogram.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(f.pca_eigen_ratio_1 >= f.pca_eigen_ratio_2);
        assert!(f.pca_eigen_ratio_1 <= 1.0 && f.pca_eigen_ratio_2 >= 0.0);
        assert!((f.bev_extent_l - 2.0).abs() < 1e-9);
    }

    #[test]
    fn features_invariant_under_joint_rigid_motion() {
        let b = Box3D::new(-3.0, 4.0, 0.9, 4.2, 1.8, 1.7, -0.8).unwrap();
        let pts: Vec<Point3> = (0..40)
            .map(|i| {
                let a = i as f64 * 0.37;
                b.pose().apply([1.9 * a.sin(), 0.8 * a.cos(), 0.7 * (a * 1.3).sin()])
            })
            .collect();
        let pose = PoseSE3::new(12.0, -5.0, 0.3, 2.2);
        let moved: Vec<Point3> = pts.iter().map(|&p| pose.apply(p)).collect();
        let f0 = InstanceFeatures::compute(&pts, &b).to_vector();
        let f1 = InstanceFeatures::compute(&moved, &pose.apply_box(&b)).to_vector();
        for (x, y) in f0.iter().zip(f1.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}
