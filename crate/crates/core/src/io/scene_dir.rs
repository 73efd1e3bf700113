//! Scene directories: `frames/frame_XXXXXX.txt` plus `ground_truth.txt`.
//!
//! A frame file starts with `frame <id> <segment> <num_agents>`; each agent
//! then contributes `agent <idx> <x> <y> <z> <yaw> <l> <w> <h> <npoints>`
//! followed by `npoints` lines of `x y z` in that agent's frame.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::records::{boxes_from_csv, boxes_to_csv};
use super::{parse_err, parse_f64, read_text, write_text};
use crate::error::{Error, Result};
use crate::geometry::{FrameId, PointCloud, PoseSE3};
use crate::scenesim::{Frame, GroundTruth, Scene};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";

pub fn frame_to_text(f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frame {} {} {}", f.frame_id, f.segment, f.num_agents());
    for v in 0..f.num_agents() {
        let p = &f.agent_poses[v];
        let [l, w, h] = f.agent_extents[v];
        let cloud = &f.agent_clouds[v];
        let t = p.translation;
        let _ = writeln!(
            s,
            "agent {v} {} {} {} {} {l} {w} {h} {}",
            t[0],
            t[1],
            t[2],
            p.yaw,
            cloud.len()
        );
        for q in &cloud.points {
            let _ = writeln!(s, "{} {} {}", q[0], q[1], q[2]);
        }
    }
    s
}

fn floats<const N: usize>(toks: &[&str], path: &Path, line: usize) -> Result<[f64; N]> {
    if toks.len() != N {
        return Err(parse_err(path, line, format!("expected {N} values, got {}", toks.len())));
    }
    let mut out = [0.0; N];
    for (o, t) in out.iter_mut().zip(toks) {
        *o = parse_f64(t, path, line)?;
    }
    Ok(out)
}

fn int<T: std::str::FromStr>(tok: Option<&str>, path: &Path, line: usize) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(path, line, "expected an integer"))
}

pub fn frame_from_text(text: &str, path: &Path) -> Result<Frame> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (n, head) = lines.next().ok_or_else(|| parse_err(path, 1, "empty frame file"))?;
    let mut t = head.split_whitespace();
    if t.next() != Some("frame") {
        return Err(parse_err(path, n, "expected 'frame' header"));
    }
    let frame_id = FrameId(int(t.next(), path, n)?);
    let segment = int(t.next(), path, n)?;
    let num_agents: usize = int(t.next(), path, n)?;
    if num_agents == 0 {
        return Err(parse_err(path, n, "frame has no agents"));
    }
    let mut frame = Frame {
        frame_id,
        segment,
        agent_poses: Vec::with_capacity(num_agents),
        agent_extents: Vec::with_capacity(num_agents),
        agent_clouds: Vec::with_capacity(num_agents),
    };
    for v in 0..num_agents {
        let (n, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("missing agent {v}")))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 10 || toks[0] != "agent" || toks[1] != v.to_string() {
            return Err(parse_err(path, n, format!("expected 'agent {v} ...' line")));
        }
        let [x, y, z, yaw, l, w, h] = floats::<7>(&toks[2..9], path, n)?;
        let count: usize = int(Some(toks[9]), path, n)?;
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = lines
                .next()
                .ok_or_else(|| parse_err(path, 0, "truncated point list"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            points.push(floats::<3>(&toks, path, n)?);
        }
        frame.agent_poses.push(PoseSE3::new(x, y, z, yaw));
        frame.agent_extents.push([l, w, h]);
        frame.agent_clouds.push(PointCloud::new(v, points));
    }
    Ok(frame)
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    scene.frames.par_iter().try_for_each(|f| {
        write_text(
            &frames_dir.join(format!("frame_{:06}.txt", f.frame_id.0)),
            &frame_to_text(f),
        )
    })?;
    let gt = scene
        .ground_truth
        .boxes
        .iter()
        .map(|(k, v)| (*k, v.as_slice()));
    write_text(&dir.join(GROUND_TRUTH_FILE), &boxes_to_csv(gt))
}

/// Loads frames in file-name order. The ground-truth file is optional; when
/// absent the scene carries no ground truth.
pub fn read_scene(dir: &Path) -> Result<Scene> {
    let frames_dir = dir.join("frames");
    let mut paths: Vec<_> = fs::read_dir(&frames_dir)
        .map_err(|e| Error::io(&frames_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    let frames = paths
        .par_iter()
        .map(|p| frame_from_text(&read_text(p)?, p))
        .collect::<Result<Vec<Frame>>>()?;
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = if gt_path.exists() {
        GroundTruth {
            boxes: boxes_from_csv(&read_text(&gt_path)?, &gt_path)?,
        }
    } else {
        GroundTruth::default()
    };
    Ok(Scene {
        frames,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{generate_scene, SceneConfig};

    #[test]
    fn scene_round_trip_is_exact() {
        let cfg = SceneConfig {
            num_frames: 3,
            frames_per_segment: 2,
            rng_seed: 5,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &scene).unwrap();
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(back.frames, scene.frames);
        // Frames without boxes have no rows, so compare through `get`.
        for f in &scene.frames {
            assert_eq!(back.ground_truth.get(f.frame_id), scene.ground_truth.get(f.frame_id));
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = "frame 0 0 1\nagent 0 0 0 0 0 4 2 1.5 2\n1 2 3\n";
        assert!(matches!(
            frame_from_text(text, Path::new("f")),
            Err(Error::Parse { .. })
        ));
    }
}
