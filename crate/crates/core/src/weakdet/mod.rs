//! Weak cluster-based detector: ground removal, grid clustering, principal-axis
//! boxes with an affine size correction, and a logistic confidence scorer.

mod fit;
mod loss;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use fit::{
    box_objective, fit_detector, initialize_detector, scorer_objective, FitOutcome, FitSettings,
    Guidance, InitSettings,
};
pub use loss::{focal_loss, focal_loss_logit, smooth_l1, smooth_l1_grad, LossWeights, P_EPS};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, FrameId, Point3, PointCloud, Proposal, ProposalSet, View};
use crate::io::checkpoint::ParamMap;
use crate::optim::{dot, sigmoid};
use crate::ppf::{InstanceFeatures, FEATURE_DIM};

/// Extents are clamped to this range after correction (m).
pub const EXTENT_RANGE: [f64; 2] = [0.1, 20.0];

/// Indices into [`DetectorModel::box_offset`].
pub const BOX_L: usize = 0;
pub const BOX_W: usize = 1;
pub const BOX_H: usize = 2;
pub const BOX_Z: usize = 3;

/// One detector input: a cloud in the ego frame plus the sensor origins that
/// produced it (used to decide which side of a partial object is hidden).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame_id: FrameId,
    pub view: View,
    pub cloud: PointCloud,
    pub sensors: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub scorer_weights: Vec<f64>,
    pub scorer_bias: f64,
    /// Feature standardization, fixed at initialization.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// `(scale, bias)` per corrected quantity: l, w, h, z.
    pub box_offset: [[f64; 2]; 4],
    pub min_cluster_points: usize,
    pub cluster_cell_size: f64,
    /// Points below this height are treated as ground.
    pub ground_threshold: f64,
    pub min_confidence: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            scorer_weights: vec![0.0; FEATURE_DIM],
            scorer_bias: 0.0,
            feature_mean: vec![0.0; FEATURE_DIM],
            feature_std: vec![1.0; FEATURE_DIM],
            box_offset: [[1.0, 0.0]; 4],
            min_cluster_points: 5,
            cluster_cell_size: 0.5,
            ground_threshold: 0.3,
            min_confidence: 0.01,
        }
    }
}

/// A cluster before scoring: its observed box and everything derived from the
/// points that does not depend on trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Tight principal-axis box around the cluster, bottom at the lowest point.
    pub observed: Box3D,
    /// Raw (unstandardized) features.
    pub features: [f64; FEATURE_DIM],
    /// Nearest sensor in the observed box's local frame.
    pub sensor_local: Point3,
    pub num_points: usize,
}

impl DetectorModel {
    pub fn validate(&self) -> Result<()> {
        let d = self.scorer_weights.len();
        if self.min_cluster_points == 0
            || !(self.cluster_cell_size > 0.0)
            || d != FEATURE_DIM
            || self.feature_mean.len() != d
            || self.feature_std.len() != d
            || self.feature_std.iter().any(|s| *s <= 0.0)
            || !(0.0..1.0).contains(&self.min_confidence)
        {
            return Err(Error::InvalidInput("malformed detector model".into()));
        }
        Ok(())
    }

    pub fn standardized(&self, raw: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut x = [0.0; FEATURE_DIM];
        for k in 0..FEATURE_DIM {
            x[k] = (raw[k] - self.feature_mean[k]) / self.feature_std[k];
        }
        x
    }

    pub fn logit(&self, c: &Candidate) -> f64 {
        dot(&self.scorer_weights, &self.standardized(&c.features)) + self.scorer_bias
    }

    pub fn confidence(&self, c: &Candidate) -> f64 {
        sigmoid(self.logit(c))
    }

    /// Applies the size correction. Growth along each horizontal axis is
    /// pushed away from the sensor when it looks at that axis end-on and split
    /// evenly when it looks from the side.
    pub fn refine(&self, c: &Candidate) -> Box3D {
        let o = &c.observed;
        let [sl, sw, sh, sz] = self.box_offset;
        let clamp = |v: f64| v.clamp(EXTENT_RANGE[0], EXTENT_RANGE[1]);
        let l = clamp(sl[0] * o.l + sl[1]);
        let w = clamp(sw[0] * o.w + sw[1]);
        let h = clamp(sh[0] * o.h + sh[1]);
        let cz = sz[0] * o.cz + sz[1];
        let side = |s: f64, half: f64| (s / half.max(1e-6)).clamp(-1.0, 1.0);
        let dx = -0.5 * (l - o.l) * side(c.sensor_local[0], 0.5 * o.l);
        let dy = -0.5 * (w - o.w) * side(c.sensor_local[1], 0.5 * o.w);
        let (s, co) = o.yaw.sin_cos();
        Box3D {
            cx: o.cx + co * dx - s * dy,
            cy: o.cy + s * dx + co * dy,
            cz,
            l,
            w,
            h,
            yaw: o.yaw,
        }
    }

    pub fn to_params(&self) -> ParamMap {
        let mut m = ParamMap::new();
        m.insert("scorer_weights", self.scorer_weights.clone());
        m.insert("scorer_bias", vec![self.scorer_bias]);
        m.insert("feature_mean", self.feature_mean.clone());
        m.insert("feature_std", self.feature_std.clone());
        m.insert("box_offset", self.box_offset.iter().flatten().copied().collect());
        m.insert("min_cluster_points", vec![self.min_cluster_points as f64]);
        m.insert("cluster_cell_size", vec![self.cluster_cell_size]);
        m.insert("ground_threshold", vec![self.ground_threshold]);
        m.insert("min_confidence", vec![self.min_confidence]);
        m
    }

    pub fn from_params(m: &ParamMap) -> Result<Self> {
        let off = m.vector("box_offset", 8)?;
        let mpts = m.scalar("min_cluster_points")?;
        if mpts < 1.0 || mpts.fract() != 0.0 {
            return Err(Error::InvalidInput(format!("min_cluster_points {mpts}")));
        }
        let model = Self {
            scorer_weights: m.vector("scorer_weights", FEATURE_DIM)?,
            scorer_bias: m.scalar("scorer_bias")?,
            feature_mean: m.vector("feature_mean", FEATURE_DIM)?,
            feature_std: m.vector("feature_std", FEATURE_DIM)?,
            box_offset: [
                [off[0], off[1]],
                [off[2], off[3]],
                [off[4], off[5]],
                [off[6], off[7]],
            ],
            min_cluster_points: mpts as usize,
            cluster_cell_size: m.scalar("cluster_cell_size")?,
            ground_threshold: m.scalar("ground_threshold")?,
            min_confidence: m.scalar("min_confidence")?,
        };
        model.validate()?;
        Ok(model)
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so the result is order-independent.
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Groups points whose BEV grid cells are 8-connected. Clusters hold point
/// indices in increasing order and are sorted by their first index.
pub fn cluster_points(points: &[Point3], cell_size: f64) -> Vec<Vec<usize>> {
    let mut cell_of: HashMap<(i64, i64), usize> = HashMap::new();
    let mut cells: Vec<(i64, i64)> = Vec::new();
    let mut point_cell = Vec::with_capacity(points.len());
    for p in points {
        let key = (
            (p[0] / cell_size).floor() as i64,
            (p[1] / cell_size).floor() as i64,
        );
        let id = *cell_of.entry(key).or_insert_with(|| {
            cells.push(key);
            cells.len() - 1
        });
        point_cell.push(id);
    }
    let mut uf = UnionFind((0..cells.len()).collect());
    for (id, &(i, j)) in cells.iter().enumerate() {
        for (di, dj) in [(1, -1), (1, 0), (1, 1), (0, 1)] {
            if let Some(&other) = cell_of.get(&(i + di, j + dj)) {
                uf.union(id, other);
            }
        }
    }
    // Cell ids follow first-point order, so root order is first-point order.
    let mut slot: Vec<Option<usize>> = vec![None; cells.len()];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (pi, &c) in point_cell.iter().enumerate() {
        let root = uf.find(c);
        let k = *slot[root].get_or_insert_with(|| {
            out.push(Vec::new());
            out.len() - 1
        });
        out[k].push(pi);
    }
    out
}

/// Principal-axis box of a cluster with `l >= w`. Extents are floored at the
/// minimum extent.
pub fn observed_box(points: &[Point3]) -> Box3D {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p[0] / n, b + p[1] / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let mut yaw = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let bounds = |yaw: f64| {
        let (s, c) = f64::sin_cos(yaw);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            let u = [c * p[0] + s * p[1], -s * p[0] + c * p[1], p[2]];
            for k in 0..3 {
                lo[k] = lo[k].min(u[k]);
                hi[k] = hi[k].max(u[k]);
            }
        }
        (lo, hi)
    };
    let (mut lo, mut hi) = bounds(yaw);
    if hi[1] - lo[1] > hi[0] - lo[0] {
        yaw += std::f64::consts::FRAC_PI_2;
        (lo, hi) = bounds(yaw);
    }
    let (s, c) = yaw.sin_cos();
    let u = 0.5 * (lo[0] + hi[0]);
    let v = 0.5 * (lo[1] + hi[1]);
    let min = EXTENT_RANGE[0];
    Box3D::new(
        c * u - s * v,
        s * u + c * v,
        0.5 * (lo[2] + hi[2]),
        (hi[0] - lo[0]).max(min),
        (hi[1] - lo[1]).max(min),
        (hi[2] - lo[2]).max(min),
        yaw,
    )
    .expect("finite cluster")
}

/// Builds a candidate from cluster points. Features are computed against the
/// observed footprint extended down to z = 0, so they do not depend on any
/// trainable parameter.
pub fn make_candidate(points: &[Point3], sensors: &[Point3]) -> Candidate {
    let observed = observed_box(points);
    let top = (observed.cz + 0.5 * observed.h).max(EXTENT_RANGE[0]);
    let reference = Box3D {
        cz: 0.5 * top,
        h: top,
        ..observed
    };
    let features = InstanceFeatures::compute(points, &reference).to_vector();
    let nearest = sensors
        .iter()
        .min_by(|a, b| {
            let da = (a[0] - observed.cx).hypot(a[1] - observed.cy);
            let db = (b[0] - observed.cx).hypot(b[1] - observed.cy);
            da.total_cmp(&db)
        })
        .copied()
        .unwrap_or([0.0; 3]);
    Candidate {
        observed,
        features,
        sensor_local: observed.to_local(nearest),
        num_points: points.len(),
    }
}

/// All clusters with enough points, in cluster order, before scoring.
pub fn extract_candidates(model: &DetectorModel, obs: &Observation) -> Vec<Candidate> {
    let above: Vec<Point3> = obs
        .cloud
        .points
        .iter()
        .filter(|p| p[2] >= model.ground_threshold)
        .copied()
        .collect();
    cluster_points(&above, model.cluster_cell_size)
        .into_iter()
        .filter(|c| c.len() >= model.min_cluster_points)
        .map(|idx| {
            let pts: Vec<Point3> = idx.iter().map(|&i| above[i]).collect();
            make_candidate(&pts, &obs.sensors)
        })
        .collect()
}

/// Scores and refines candidates, dropping those under the minimum confidence.
pub fn proposals_from_candidates(
    model: &DetectorModel,
    frame_id: FrameId,
    view: View,
    candidates: &[Candidate],
) -> ProposalSet {
    let items = candidates
        .iter()
        .filter_map(|c| {
            let conf = model.confidence(c);
            (conf >= model.min_confidence).then(|| Proposal::new(model.refine(c), conf))
        })
        .collect();
    ProposalSet::new(frame_id, view, items)
}

pub fn propose(model: &DetectorModel, obs: &Observation) -> ProposalSet {
    proposals_from_candidates(model, obs.frame_id, obs.view, &extract_candidates(model, obs))
}

/// Frame-parallel [`propose`]; output order follows `observations`.
pub fn propose_all(model: &DetectorModel, observations: &[Observation]) -> Vec<ProposalSet> {
    observations.par_iter().map(|o| propose(model, o)).collect()
}
