//! Independent reference implementations and random instance generators
//! shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use coopdet::geometry::{rotated_iou_bev, Box3D, FrameId, PointCloud, Proposal, ProposalSet, View};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(r: &mut impl Rng, spread: f64) -> Box3D {
    Box3D::new(
        r.random_range(-spread..=spread),
        r.random_range(-spread..=spread),
        r.random_range(0.0..2.0),
        r.random_range(0.3..6.0),
        r.random_range(0.3..3.0),
        r.random_range(0.5..3.0),
        r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

/// A box near `a`, so that pairs overlap often.
pub fn nearby_box(r: &mut impl Rng, a: &Box3D) -> Box3D {
    let b = random_box(r, 2.5);
    Box3D::new(a.cx + b.cx, a.cy + b.cy, b.cz, b.l, b.w, b.h, b.yaw).unwrap()
}

pub fn random_proposals(r: &mut impl Rng, n: usize, spread: f64, view: View) -> ProposalSet {
    let items = (0..n)
        .map(|_| {
            // Coarse confidences make ties common.
            let c = (r.random_range(0..20) as f64) / 20.0;
            Proposal::new(random_box(r, spread), c)
        })
        .collect();
    ProposalSet::new(FrameId(0), view, items)
}

/// Monte-Carlo BEV IoU from `n` uniform samples over the joint bounding
/// rectangle.
pub fn mc_iou(a: &Box3D, b: &Box3D, n: usize, r: &mut impl Rng) -> f64 {
    let corners: Vec<[f64; 2]> = a.bev_corners().into_iter().chain(b.bev_corners()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for c in &corners {
        x0 = x0.min(c[0]);
        x1 = x1.max(c[0]);
        y0 = y0.min(c[1]);
        y1 = y1.max(c[1]);
    }
    let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..n {
        let x = r.random_range(x0..x1);
        let y = r.random_range(y0..y1);
        let (pa, pb) = (in_footprint(a, x, y), in_footprint(b, x, y));
        ia += pa as usize;
        ib += pb as usize;
        both += (pa && pb) as usize;
    }
    let union = ia + ib - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Footprint membership by projecting onto the box axes.
fn in_footprint(b: &Box3D, x: f64, y: f64) -> bool {
    let (ux, uy) = (b.yaw.cos(), b.yaw.sin());
    let (dx, dy) = (x - b.cx, y - b.cy);
    (dx * ux + dy * uy).abs() <= b.l / 2.0 && (-dx * uy + dy * ux).abs() <= b.w / 2.0
}

/// Inverse-transform membership: undo translation, then undo yaw.
pub fn contains_oracle(b: &Box3D, p: [f64; 3]) -> bool {
    let local = b.pose().inverse().apply(p);
    local[0].abs() <= b.l / 2.0 && local[1].abs() <= b.w / 2.0 && local[2].abs() <= b.h / 2.0
}

/// Classic suppression loop: take the best remaining item (lowest index on
/// ties), drop everything overlapping it at `eta` or more, repeat.
pub fn brute_nms(items: &[Proposal], eta: f64) -> Vec<usize> {
    let mut alive = vec![true; items.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..items.len() {
            if alive[i] && best.is_none_or(|b| items[i].confidence > items[b].confidence) {
                best = Some(i);
            }
        }
        let Some(k) = best else { break };
        out.push(k);
        alive[k] = false;
        for j in 0..items.len() {
            if alive[j] && rotated_iou_bev(&items[k].bbox, &items[j].bbox) >= eta {
                alive[j] = false;
            }
        }
    }
    out
}

/// Double loop over multi-view and ego proposals with per-point support
/// counting.
pub fn brute_unmatched(p_e: &ProposalSet, p_m: &ProposalSet, cloud: &PointCloud, eta: f64, rho: usize) -> Vec<Proposal> {
    let mut out = Vec::new();
    for m in &p_m.items {
        let mut matched = false;
        for e in &p_e.items {
            if rotated_iou_bev(&m.bbox, &e.bbox) >= eta {
                matched = true;
            }
        }
        let mut support = 0;
        for p in &cloud.points {
            if contains_oracle(&m.bbox, *p) {
                support += 1;
            }
        }
        if !matched && support >= rho {
            out.push(*m);
        }
    }
    out
}

/// Points clustered around the given boxes plus uniform background.
pub fn cloud_around(r: &mut impl Rng, boxes: &[Box3D], per_box: usize, background: usize, spread: f64) -> PointCloud {
    let mut pts = Vec::new();
    for b in boxes {
        let n = r.random_range(0..=per_box);
        for _ in 0..n {
            let local = [
                r.random_range(-0.6..0.6) * b.l,
                r.random_range(-0.6..0.6) * b.w,
                r.random_range(-0.6..0.6) * b.h,
            ];
            pts.push(b.pose().apply(local));
        }
    }
    for _ in 0..background {
        pts.push([
            r.random_range(-spread..spread),
            r.random_range(-spread..spread),
            r.random_range(0.0..2.0),
        ]);
    }
    PointCloud::new(0, pts)
}

/// Central finite-difference gradient.
pub fn fd_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + h;
            let up = f(&p);
            p[k] = x[k] - h;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative deviation; entries where both sides are below `floor`
/// compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

pub fn first_differences(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| w[1] - w[0]).collect()
}
