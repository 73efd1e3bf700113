//! Deterministic synthetic multi-agent LiDAR world.
//!
//! Frames are grouped into short segments. Within a segment every vehicle moves
//! linearly at constant speed, so consecutive frames are temporally coherent
//! (needed for latency simulation). Each agent samples points on the visible,
//! unoccluded faces of the vehicles around it with a surface density that falls
//! off with range, plus ground returns and clutter blobs.
//!
//! Ground truth lives in [`GroundTruth`], which is returned next to the frames
//! and is meant for evaluation only.

mod perturb;

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou_bev, Box3D, FrameId, Point3, PointCloud, PoseSE3};
use crate::rng::{self, Stream};
pub use perturb::{apply_latency, perturb_poses, PoseNoise};

pub const VEHICLE_LENGTH: [f64; 2] = [3.5, 5.5];
pub const VEHICLE_WIDTH: [f64; 2] = [1.6, 2.2];
pub const VEHICLE_HEIGHT: [f64; 2] = [1.4, 1.9];

const MIN_SAMPLING_RANGE: f64 = 3.0;
const REFERENCE_RANGE: f64 = 10.0;
const PLACEMENT_ATTEMPTS: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_frames: usize,
    /// Number of agents including the ego (index 0).
    pub num_agents: usize,
    /// Inclusive range of ground-truth vehicles per segment; communicated
    /// agents count toward it.
    pub vehicles_per_frame: [usize; 2],
    /// Half-width of the square region vehicles are placed in (m).
    pub map_extent: f64,
    pub points_per_m2_at_10m: f64,
    pub density_falloff_exponent: f64,
    pub occlusion_enabled: bool,
    pub clutter_clusters_per_frame: [usize; 2],
    /// Inclusive range of clutter points per cluster, as seen from 10 m.
    pub clutter_cluster_size: [usize; 2],
    pub rng_seed: u64,
    pub frames_per_segment: usize,
    pub frame_interval_s: f64,
    pub sensor_height: f64,
    pub lidar_range: f64,
    pub ground_points_per_agent: usize,
    /// Inclusive range of ego-to-agent distance at segment start (m).
    pub agent_distance: [f64; 2],
    pub max_speed: f64,
    /// Clearance kept between vehicle footprints (m).
    pub min_gap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_frames: 200,
            num_agents: 2,
            vehicles_per_frame: [6, 12],
            map_extent: 60.0,
            points_per_m2_at_10m: 30.0,
            density_falloff_exponent: 2.0,
            occlusion_enabled: true,
            clutter_clusters_per_frame: [2, 5],
            clutter_cluster_size: [40, 250],
            rng_seed: 0,
            frames_per_segment: 10,
            frame_interval_s: 0.1,
            sensor_height: 1.9,
            lidar_range: 100.0,
            ground_points_per_agent: 1500,
            agent_distance: [10.0, 40.0],
            max_speed: 8.0,
            min_gap: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidInput(m));
        if self.num_agents == 0 {
            return fail("num_agents must be >= 1".into());
        }
        if self.num_frames == 0 || self.frames_per_segment == 0 {
            return fail("num_frames and frames_per_segment must be >= 1".into());
        }
        for (name, r) in [
            ("vehicles_per_frame", self.vehicles_per_frame),
            ("clutter_clusters_per_frame", self.clutter_clusters_per_frame),
            ("clutter_cluster_size", self.clutter_cluster_size),
        ] {
            if r[0] > r[1] {
                return fail(format!("{name}: min {} > max {}", r[0], r[1]));
            }
        }
        if self.vehicles_per_frame[0] + 1 < self.num_agents {
            return fail(format!(
                "vehicles_per_frame min {} cannot hold {} communicated agents",
                self.vehicles_per_frame[0],
                self.num_agents - 1
            ));
        }
        let positive = [
            ("map_extent", self.map_extent),
            ("points_per_m2_at_10m", self.points_per_m2_at_10m),
            ("frame_interval_s", self.frame_interval_s),
            ("sensor_height", self.sensor_height),
            ("lidar_range", self.lidar_range),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.density_falloff_exponent >= 0.0)
            || !(self.max_speed >= 0.0)
            || !(self.min_gap >= 0.0)
        {
            return fail("falloff exponent, max_speed and min_gap must be non-negative".into());
        }
        if !(self.agent_distance[0] >= 0.0 && self.agent_distance[0] <= self.agent_distance[1]) {
            return fail(format!("bad agent_distance {:?}", self.agent_distance));
        }
        Ok(())
    }

    /// Surface density (points/m²) at `range` meters.
    pub fn density_at(&self, range: f64) -> f64 {
        self.points_per_m2_at_10m
            * (REFERENCE_RANGE / range.max(MIN_SAMPLING_RANGE)).powf(self.density_falloff_exponent)
    }
}

/// One synchronized capture of all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: FrameId,
    pub segment: u32,
    /// World poses; index 0 is the ego.
    pub agent_poses: Vec<PoseSE3>,
    /// Own vehicle extents `[l, w, h]` each agent broadcasts with its pose.
    pub agent_extents: Vec<[f64; 3]>,
    /// One cloud per agent, in that agent's own frame.
    pub agent_clouds: Vec<PointCloud>,
}

impl Frame {
    pub fn num_agents(&self) -> usize {
        self.agent_poses.len()
    }

    /// `T_{v→e}`: maps agent `v` coordinates into the ego frame.
    pub fn relative_pose(&self, v: usize) -> PoseSE3 {
        self.agent_poses[0].inverse().compose(&self.agent_poses[v])
    }

    /// Sensor origins of all agents, in the ego frame.
    pub fn sensor_origins(&self, sensor_height: f64) -> Vec<Point3> {
        (0..self.num_agents())
            .map(|v| self.relative_pose(v).apply([0.0, 0.0, sensor_height]))
            .collect()
    }

    /// Boxes of the communicated agents (1..V) in the ego frame, derived from
    /// their shared poses and extents. These are the only box-level priors the
    /// training loop may use.
    pub fn positional_priors(&self) -> Vec<Box3D> {
        (1..self.num_agents())
            .map(|v| {
                let [l, w, h] = self.agent_extents[v];
                let local = Box3D {
                    cx: 0.0,
                    cy: 0.0,
                    cz: 0.5 * h,
                    l,
                    w,
                    h,
                    yaw: 0.0,
                };
                self.relative_pose(v).apply_box(&local)
            })
            .collect()
    }

    pub fn ego_cloud(&self) -> &PointCloud {
        &self.agent_clouds[0]
    }
}

/// Ground-truth boxes per frame, in each frame's ego coordinates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: BTreeMap<FrameId, Vec<Box3D>>,
}

impl GroundTruth {
    pub fn get(&self, frame: FrameId) -> &[Box3D] {
        self.boxes.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frames: Vec<Frame>,
    pub ground_truth: GroundTruth,
}

/// Union of all agent clouds mapped into the ego frame. The ego cloud comes
/// first and is copied verbatim.
pub fn fuse_to_ego(frame: &Frame) -> PointCloud {
    let total = frame.agent_clouds.iter().map(PointCloud::len).sum();
    let mut points = Vec::with_capacity(total);
    points.extend_from_slice(&frame.agent_clouds[0].points);
    for v in 1..frame.num_agents() {
        let pose = frame.relative_pose(v);
        points.extend(frame.agent_clouds[v].points.iter().map(|&p| pose.apply(p)));
    }
    PointCloud::new(0, points)
}

#[derive(Debug, Clone, Copy)]
struct Mover {
    start: [f64; 2],
    yaw: f64,
    speed: f64,
    extents: [f64; 3],
}

impl Mover {
    fn box_at(&self, time: f64) -> Box3D {
        let d = self.speed * time;
        Box3D {
            cx: self.start[0] + d * self.yaw.cos(),
            cy: self.start[1] + d * self.yaw.sin(),
            cz: 0.5 * self.extents[2],
            l: self.extents[0],
            w: self.extents[1],
            h: self.extents[2],
            yaw: self.yaw,
        }
    }

    fn pose_at(&self, time: f64) -> PoseSE3 {
        let b = self.box_at(time);
        PoseSE3::new(b.cx, b.cy, 0.0, b.yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ClutterKind {
    Bush,
    Hedge,
    Pole,
    Container,
}

#[derive(Debug, Clone, Copy)]
struct Clutter {
    kind: ClutterKind,
    footprint: Box3D,
    base_count: usize,
}

impl Clutter {
    fn sample_point(&self, rng: &mut ChaCha8Rng) -> Point3 {
        let b = &self.footprint;
        let local = match self.kind {
            ClutterKind::Bush => loop {
                let p: [f64; 3] = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
                    break [0.5 * b.l * p[0], 0.5 * b.w * p[1], 0.5 * b.h * p[2]];
                }
            },
            ClutterKind::Hedge => [
                rng.random_range(-0.5..0.5) * b.l,
                rng.random_range(-0.5..0.5) * b.w,
                rng.random_range(-0.5..0.5) * b.h,
            ],
            ClutterKind::Pole => {
                let r = 0.5 * b.l * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..TAU);
                [r * a.cos(), r * a.sin(), rng.random_range(-0.5..0.5) * b.h]
            }
            ClutterKind::Container => {
                let areas = [b.w * b.h, b.w * b.h, b.l * b.h, b.l * b.h, b.l * b.w];
                let face = pick_weighted(rng, &areas);
                let u: f64 = rng.random_range(-0.5..0.5);
                let v: f64 = rng.random_range(-0.5..0.5);
                match face {
                    0 => [0.5 * b.l, u * b.w, v * b.h],
                    1 => [-0.5 * b.l, u * b.w, v * b.h],
                    2 => [u * b.l, 0.5 * b.w, v * b.h],
                    3 => [u * b.l, -0.5 * b.w, v * b.h],
                    _ => [u * b.l, v * b.w, 0.5 * b.h],
                }
            }
        };
        b.pose().apply(local)
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

struct SegmentLayout {
    /// Agents first (index 0 = ego), then the remaining vehicles.
    movers: Vec<Mover>,
    clutter: Vec<Clutter>,
}

fn random_extents(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(VEHICLE_LENGTH[0]..=VEHICLE_LENGTH[1]),
        rng.random_range(VEHICLE_WIDTH[0]..=VEHICLE_WIDTH[1]),
        rng.random_range(VEHICLE_HEIGHT[0]..=VEHICLE_HEIGHT[1]),
    ]
}

fn inflate(b: &Box3D, margin: f64) -> Box3D {
    Box3D {
        l: b.l + margin,
        w: b.w + margin,
        ..*b
    }
}

fn layout_segment(cfg: &SceneConfig, segment: u32, frames: usize, first_frame: usize) -> Result<SegmentLayout> {
    let mut rng = rng::stream(cfg.rng_seed, Stream::Segment, segment as u64, 0);
    let dt = cfg.frame_interval_s;
    let times: Vec<f64> = (0..frames).map(|k| k as f64 * dt).collect();
    let n_vehicles = rng.random_range(cfg.vehicles_per_frame[0]..=cfg.vehicles_per_frame[1]);
    let n_clutter =
        rng.random_range(cfg.clutter_clusters_per_frame[0]..=cfg.clutter_clusters_per_frame[1]);

    let mut movers: Vec<Mover> = Vec::with_capacity(n_vehicles + 1);
    let clear = |movers: &[Mover], cand: &Mover| {
        times.iter().all(|&t| {
            let b = inflate(&cand.box_at(t), cfg.min_gap);
            movers
                .iter()
                .all(|m| rotated_iou_bev(&inflate(&m.box_at(t), cfg.min_gap), &b) == 0.0)
        })
    };
    let fail = |what: &str| Error::Generation {
        frame: first_frame,
        reason: format!("could not place {what} without overlap; reduce vehicles_per_frame or enlarge map_extent"),
    };
    let speed = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            0.0
        } else {
            rng.random_range(0.0..=cfg.max_speed)
        }
    };

    movers.push(Mover {
        start: [0.0, 0.0],
        yaw: rng.random_range(-PI..PI),
        speed: speed(&mut rng),
        extents: random_extents(&mut rng),
    });
    for _ in 1..cfg.num_agents {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let d = rng.random_range(cfg.agent_distance[0]..=cfg.agent_distance[1]);
            let bearing = rng.random_range(-PI..PI);
            let m = Mover {
                start: [d * bearing.cos(), d * bearing.sin()],
                yaw: rng.random_range(-PI..PI),
                speed: speed(&mut rng),
                extents: random_extents(&mut rng),
            };
            clear(&movers, &m).then_some(m)
        });
        movers.push(placed.ok_or_else(|| fail("communicated agent"))?);
    }
    let others = n_vehicles + 1 - cfg.num_agents;
    for _ in 0..others {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let e = cfg.map_extent;
            let m = Mover {
                start: [rng.random_range(-e..e), rng.random_range(-e..e)],
                yaw: rng.random_range(-PI..PI),
                speed: speed(&mut rng),
                extents: random_extents(&mut rng),
            };
            clear(&movers, &m).then_some(m)
        });
        movers.push(placed.ok_or_else(|| fail("vehicle"))?);
    }

    let mut clutter: Vec<Clutter> = Vec::with_capacity(n_clutter);
    for _ in 0..n_clutter {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let kind = match pick_weighted(&mut rng, &[0.35, 0.3, 0.2, 0.15]) {
                0 => ClutterKind::Bush,
                1 => ClutterKind::Hedge,
                2 => ClutterKind::Pole,
                _ => ClutterKind::Container,
            };
            let (l, w, h) = match kind {
                ClutterKind::Bush => {
                    let l = rng.random_range(0.8..2.4);
                    (l, rng.random_range(0.8..=l), rng.random_range(0.6..1.6))
                }
                ClutterKind::Hedge => (
                    rng.random_range(2.0..6.0),
                    rng.random_range(0.3..0.8),
                    rng.random_range(0.8..2.0),
                ),
                ClutterKind::Pole => {
                    let d = rng.random_range(0.2..0.4);
                    (d, d, rng.random_range(2.5..5.0))
                }
                ClutterKind::Container => (
                    rng.random_range(1.5..3.0),
                    rng.random_range(1.2..2.0),
                    rng.random_range(1.2..2.0),
                ),
            };
            let e = cfg.map_extent;
            let footprint = Box3D {
                cx: rng.random_range(-e..e),
                cy: rng.random_range(-e..e),
                cz: 0.5 * h,
                l,
                w,
                h,
                yaw: rng.random_range(-PI..PI),
            };
            let base_count =
                rng.random_range(cfg.clutter_cluster_size[0]..=cfg.clutter_cluster_size[1]);
            let grown = inflate(&footprint, cfg.min_gap);
            let free = times.iter().all(|&t| {
                movers
                    .iter()
                    .all(|m| rotated_iou_bev(&inflate(&m.box_at(t), cfg.min_gap), &grown) == 0.0)
            }) && clutter
                .iter()
                .all(|c| rotated_iou_bev(&c.footprint, &grown) == 0.0);
            free.then_some(Clutter {
                kind,
                footprint,
                base_count,
            })
        });
        clutter.push(placed.ok_or_else(|| fail("clutter cluster"))?);
    }

    Ok(SegmentLayout { movers, clutter })
}

/// Whether the BEV segment `a -> b` crosses the footprint of `bbox`.
fn segment_hits_box(a: [f64; 2], b: [f64; 2], bbox: &Box3D) -> bool {
    let p = bbox.to_local([a[0], a[1], bbox.cz]);
    let q = bbox.to_local([b[0], b[1], bbox.cz]);
    let d = [q[0] - p[0], q[1] - p[1]];
    let half = [0.5 * bbox.l, 0.5 * bbox.w];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        if d[axis].abs() < 1e-12 {
            if p[axis].abs() > half[axis] {
                return false;
            }
            continue;
        }
        let mut ta = (-half[axis] - p[axis]) / d[axis];
        let mut tb = (half[axis] - p[axis]) / d[axis];
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

struct FaceSpec {
    center: Point3,
    normal: Point3,
    area: f64,
}

fn faces(b: &Box3D) -> [FaceSpec; 5] {
    let (hl, hw, hh) = (0.5 * b.l, 0.5 * b.w, 0.5 * b.h);
    [
        FaceSpec { center: [hl, 0.0, 0.0], normal: [1.0, 0.0, 0.0], area: b.w * b.h },
        FaceSpec { center: [-hl, 0.0, 0.0], normal: [-1.0, 0.0, 0.0], area: b.w * b.h },
        FaceSpec { center: [0.0, hw, 0.0], normal: [0.0, 1.0, 0.0], area: b.l * b.h },
        FaceSpec { center: [0.0, -hw, 0.0], normal: [0.0, -1.0, 0.0], area: b.l * b.h },
        FaceSpec { center: [0.0, 0.0, hh], normal: [0.0, 0.0, 1.0], area: b.l * b.w },
    ]
}

fn sample_on_face(rng: &mut ChaCha8Rng, b: &Box3D, face: &FaceSpec) -> Point3 {
    let mut p = face.center;
    let ext = [b.l, b.w, b.h];
    for axis in 0..3 {
        if face.normal[axis] == 0.0 {
            p[axis] = rng.random_range(-0.5..=0.5) * ext[axis];
        }
    }
    b.pose().apply(p)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

struct WorldSnapshot {
    /// World boxes, ego first. Returns from the ego body are not simulated.
    vehicles: Vec<Box3D>,
    clutter: Vec<Clutter>,
}

fn sample_agent_cloud(
    cfg: &SceneConfig,
    world: &WorldSnapshot,
    agent: usize,
    pose: &PoseSE3,
    rng: &mut ChaCha8Rng,
) -> PointCloud {
    let sensor = pose.apply([0.0, 0.0, cfg.sensor_height]);
    let s2 = [sensor[0], sensor[1]];
    let occluders: Vec<&Box3D> = world
        .vehicles
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != agent)
        .map(|(_, b)| b)
        .collect();
    let occluded = |target: Option<&Box3D>, p: [f64; 2]| {
        cfg.occlusion_enabled
            && occluders
                .iter()
                .any(|o| target.is_none_or(|t| !std::ptr::eq(*o, t)) && segment_hits_box(s2, p, o))
    };

    let mut world_points: Vec<Point3> = Vec::new();

    // Vehicle surfaces. Index 0 is the ego, which is never sampled.
    for (i, vb) in world.vehicles.iter().enumerate().skip(1) {
        if i == agent {
            continue;
        }
        let sensor_local = vb.to_local(sensor);
        for face in faces(vb).iter() {
            let facing: f64 = (0..3)
                .map(|k| face.normal[k] * (sensor_local[k] - face.center[k]))
                .sum();
            if facing <= 0.0 {
                continue;
            }
            let fc = vb.pose().apply(face.center);
            let range = ((fc[0] - sensor[0]).powi(2)
                + (fc[1] - sensor[1]).powi(2)
                + (fc[2] - sensor[2]).powi(2))
            .sqrt();
            if range > cfg.lidar_range || occluded(Some(vb), [fc[0], fc[1]]) {
                continue;
            }
            let n = poisson(rng, face.area * cfg.density_at(range));
            for _ in 0..n {
                world_points.push(sample_on_face(rng, vb, face));
            }
        }
    }

    // Clutter blobs, thinned with range.
    for c in &world.clutter {
        let r = (c.footprint.cx - sensor[0]).hypot(c.footprint.cy - sensor[1]);
        if r > cfg.lidar_range {
            continue;
        }
        let keep = (REFERENCE_RANGE / r.max(MIN_SAMPLING_RANGE))
            .powf(cfg.density_falloff_exponent)
            .min(1.0);
        let n = Binomial::new(c.base_count as u64, keep)
            .map(|d| d.sample(rng) as usize)
            .unwrap_or(0);
        for _ in 0..n {
            let p = c.sample_point(rng);
            if !occluded(None, [p[0], p[1]]) {
                world_points.push(p);
            }
        }
    }

    // Ground returns, log-uniform in range around the sensor.
    let jitter = Normal::new(0.0, 0.02).expect("valid std");
    let (r_lo, r_hi) = (2.5f64, cfg.lidar_range);
    for _ in 0..cfg.ground_points_per_agent {
        let r = r_lo * (r_hi / r_lo).powf(rng.random::<f64>());
        let a = rng.random_range(0.0..TAU);
        let (x, y) = (sensor[0] + r * a.cos(), sensor[1] + r * a.sin());
        let z: f64 = jitter.sample(rng);
        let under_vehicle = world.vehicles.iter().any(|b| b.contains_bev(x, y));
        if !under_vehicle && !occluded(None, [x, y]) {
            world_points.push([x, y, z]);
        }
    }

    let to_agent = pose.inverse();
    PointCloud::new(agent, world_points.into_iter().map(|p| to_agent.apply(p)).collect())
}

/// Generates `cfg.num_frames` frames plus their ground truth. Deterministic for
/// a fixed config: each segment draws its layout from `(seed, segment)` and
/// each frame/agent its samples from `(seed, frame, agent)`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let fps = cfg.frames_per_segment;
    let n_segments = cfg.num_frames.div_ceil(fps);
    let layouts: Vec<SegmentLayout> = (0..n_segments)
        .into_par_iter()
        .map(|s| {
            let frames = fps.min(cfg.num_frames - s * fps);
            layout_segment(cfg, s as u32, frames, s * fps)
        })
        .collect::<Result<_>>()?;

    let generated: Vec<(Frame, Vec<Box3D>)> = (0..cfg.num_frames)
        .into_par_iter()
        .map(|f| {
            let segment = f / fps;
            let layout = &layouts[segment];
            let time = (f % fps) as f64 * cfg.frame_interval_s;
            let vehicles: Vec<Box3D> = layout.movers.iter().map(|m| m.box_at(time)).collect();
            let poses: Vec<PoseSE3> = layout.movers[..cfg.num_agents]
                .iter()
                .map(|m| m.pose_at(time))
                .collect();
            let world = WorldSnapshot {
                vehicles,
                clutter: layout.clutter.clone(),
            };
            let clouds = (0..cfg.num_agents)
                .map(|v| {
                    let mut rng = rng::stream(cfg.rng_seed, Stream::FrameSampling, f as u64, v as u64);
                    sample_agent_cloud(cfg, &world, v, &poses[v], &mut rng)
                })
                .collect();
            let to_ego = poses[0].inverse();
            let gt = world.vehicles[1..].iter().map(|b| to_ego.apply_box(b)).collect();
            let frame = Frame {
                frame_id: FrameId(f as u32),
                segment: segment as u32,
                agent_poses: poses,
                agent_extents: layout.movers[..cfg.num_agents]
                    .iter()
                    .map(|m| m.extents)
                    .collect(),
                agent_clouds: clouds,
            };
            (frame, gt)
        })
        .collect();

    let mut ground_truth = GroundTruth::default();
    let mut frames = Vec::with_capacity(generated.len());
    for (frame, gt) in generated {
        ground_truth.boxes.insert(frame.frame_id, gt);
        frames.push(frame);
    }
    Ok(Scene {
        frames,
        ground_truth,
    })
}
