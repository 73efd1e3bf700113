//! Robustness perturbations: localization noise and communication latency.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Frame;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseNoise {
    /// Std of the x/y translation noise (m).
    pub sigma_m: f64,
    /// Std of the yaw noise (degrees); zero disables it.
    pub yaw_sigma_deg: f64,
}

impl Default for PoseNoise {
    fn default() -> Self {
        Self {
            sigma_m: 0.2,
            yaw_sigma_deg: 0.2,
        }
    }
}

/// Adds i.i.d. Gaussian noise to the shared poses of agents 1..V. The ego pose
/// and every point cloud are left untouched, so fused clouds and positional
/// priors inherit the error.
pub fn perturb_poses(frames: &[Frame], noise: &PoseNoise, seed: u64) -> Vec<Frame> {
    assert!(noise.sigma_m >= 0.0 && noise.yaw_sigma_deg >= 0.0);
    let trans = Normal::new(0.0, noise.sigma_m).expect("finite std");
    let yaw = Normal::new(0.0, noise.yaw_sigma_deg.to_radians()).expect("finite std");
    frames
        .iter()
        .map(|f| {
            let mut out = f.clone();
            let mut rng = rng::stream(seed, Stream::PoseNoise, f.frame_id.0 as u64, 0);
            for pose in out.agent_poses.iter_mut().skip(1) {
                pose.translation[0] += trans.sample(&mut rng);
                pose.translation[1] += trans.sample(&mut rng);
                pose.yaw += yaw.sample(&mut rng);
            }
            out
        })
        .collect()
}

/// Replaces each non-ego agent's pose, extents and cloud in frame `t` with its
/// data from frame `t - delay_frames`. When that frame does not exist or lies in
/// a different segment, the frame keeps only the ego. Frames are assumed to be
/// in capture order.
pub fn apply_latency(frames: &[Frame], delay_frames: usize) -> Vec<Frame> {
    if delay_frames == 0 {
        return frames.to_vec();
    }
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let mut out = Frame {
                frame_id: f.frame_id,
                segment: f.segment,
                agent_poses: vec![f.agent_poses[0]],
                agent_extents: vec![f.agent_extents[0]],
                agent_clouds: vec![f.agent_clouds[0].clone()],
            };
            if let Some(src) = t.checked_sub(delay_frames).map(|s| &frames[s]) {
                if src.segment == f.segment {
                    out.agent_poses.extend_from_slice(&src.agent_poses[1..]);
                    out.agent_extents.extend_from_slice(&src.agent_extents[1..]);
                    out.agent_clouds.extend_from_slice(&src.agent_clouds[1..]);
                }
            }
            out
        })
        .collect()
}
