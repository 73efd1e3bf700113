//! Cross-view consensus: unmatched-but-supported multi-view proposals join the
//! ego pseudo labels, and a masked BEV discrepancy between the ego and fused
//! rasters guides the ego detector.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, points_in_box, rotated_iou_bev, Box3D, PointCloud, ProposalSet};
use crate::io::write_text;

/// Channels: log-count, max height, mean height, occupancy.
pub const BEV_CHANNELS: usize = 4;

/// Grid geometry shared by both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevSpec {
    pub cell_size: f64,
    /// The grid spans `[-half_extent, half_extent)` on both axes.
    pub half_extent: f64,
}

impl Default for BevSpec {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            half_extent: 70.0,
        }
    }
}

impl BevSpec {
    pub fn cells(&self) -> usize {
        (2.0 * self.half_extent / self.cell_size).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_size > 0.0 && self.half_extent > 0.0 && self.cells() > 0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid BEV grid {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    /// Rows follow x, columns follow y.
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub cell_size: f64,
    /// Ego-frame coordinates of the corner of cell (0, 0).
    pub origin: [f64; 2],
    pub values: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(spec: &BevSpec) -> Self {
        let n = spec.cells();
        Self {
            h: n,
            w: n,
            c: BEV_CHANNELS,
            cell_size: spec.cell_size,
            origin: [-spec.half_extent, -spec.half_extent],
            values: vec![0.0; n * n * BEV_CHANNELS],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.values[(i * self.w + j) * self.c + ch]
    }

    /// Cell holding ego-frame point `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let i = ((x - self.origin[0]) / self.cell_size).floor();
        let j = ((y - self.origin[1]) / self.cell_size).floor();
        (i >= 0.0 && j >= 0.0 && (i as usize) < self.h && (j as usize) < self.w)
            .then_some((i as usize, j as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.cell_size,
            self.origin[1] + (j as f64 + 0.5) * self.cell_size,
        ]
    }

    fn same_shape(&self, o: &BevGrid) -> bool {
        self.h == o.h
            && self.w == o.w
            && self.c == o.c
            && self.cell_size == o.cell_size
            && self.origin == o.origin
    }

    /// Header line `H W C cell_size origin_x origin_y`, then one line per
    /// cell with its channel values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            self.h, self.w, self.c, self.cell_size, self.origin[0], self.origin[1]
        );
        for cell in self.values.chunks(self.c) {
            let line: Vec<String> = cell.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

/// Rasterizes `cloud` onto the grid; points outside it are dropped.
pub fn bev_rasterize(cloud: &PointCloud, spec: &BevSpec) -> BevGrid {
    let mut g = BevGrid::zeros(spec);
    let cells = g.h * g.w;
    let mut count = vec![0u32; cells];
    let mut max_z = vec![f64::NEG_INFINITY; cells];
    let mut sum_z = vec![0.0; cells];
    for p in &cloud.points {
        if let Some((i, j)) = g.cell_of(p[0], p[1]) {
            let k = i * g.w + j;
            count[k] += 1;
            max_z[k] = max_z[k].max(p[2]);
            sum_z[k] += p[2];
        }
    }
    for k in 0..cells {
        if count[k] > 0 {
            let n = count[k] as f64;
            let v = &mut g.values[k * BEV_CHANNELS..(k + 1) * BEV_CHANNELS];
            v[0] = n.ln_1p();
            v[1] = max_z[k];
            v[2] = sum_z[k] / n;
            v[3] = 1.0;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMask {
    pub h: usize,
    pub w: usize,
    pub gamma: f64,
    pub values: Vec<bool>,
}

impl VisibilityMask {
    pub fn visible(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }
}

/// Cells whose channel mean reaches `gamma`.
pub fn visibility_mask(f_e: &BevGrid, gamma: f64) -> VisibilityMask {
    let values = f_e
        .values
        .chunks(f_e.c)
        .map(|cell| cell.iter().sum::<f64>() / f_e.c as f64 >= gamma)
        .collect();
    VisibilityMask {
        h: f_e.h,
        w: f_e.w,
        gamma,
        values,
    }
}

/// Mean squared difference over visible cells (all channels), normalized by
/// the number of visible cells, and its gradient with respect to `f_e`. With
/// no visible cell both are zero.
pub fn bev_alignment_loss(
    f_e: &BevGrid,
    f_m: &BevGrid,
    mask: &VisibilityMask,
) -> Result<(f64, BevGrid)> {
    if !f_e.same_shape(f_m) || mask.h != f_e.h || mask.w != f_e.w {
        return Err(Error::InvalidInput(format!(
            "BEV shape mismatch: {}x{}x{} vs {}x{}x{}, mask {}x{}",
            f_e.h, f_e.w, f_e.c, f_m.h, f_m.w, f_m.c, mask.h, mask.w
        )));
    }
    let mut grad = BevGrid {
        values: vec![0.0; f_e.values.len()],
        ..f_e.clone()
    };
    let z = mask.visible();
    if z == 0 {
        return Ok((0.0, grad));
    }
    let z = z as f64;
    let mut loss = 0.0;
    for (k, &m) in mask.values.iter().enumerate() {
        if !m {
            continue;
        }
        for ch in 0..f_e.c {
            let idx = k * f_e.c + ch;
            let d = f_e.values[idx] - f_m.values[idx];
            loss += d * d;
            grad.values[idx] = 2.0 * d / z;
        }
    }
    Ok((loss / z, grad))
}

/// `mu3` times the alignment gradient under the visibility mask of `f_e`.
pub fn ccl_guidance(f_e: &BevGrid, f_m: &BevGrid, gamma: f64, mu3: f64) -> Result<BevGrid> {
    let mask = visibility_mask(f_e, gamma);
    let (_, mut g) = bev_alignment_loss(f_e, f_m, &mask)?;
    g.values.iter_mut().for_each(|v| *v *= mu3);
    Ok(g)
}

/// Mean over the cells whose centers fall inside the footprint of `bbox` of
/// the channel-averaged masked absolute difference `|F_e − F_m|`. Zero when the
/// footprint covers no cell center.
pub fn footprint_discrepancy(
    f_e: &BevGrid,
    f_m: &BevGrid,
    mask: &VisibilityMask,
    bbox: &Box3D,
) -> f64 {
    let r = 0.5 * bbox.l.hypot(bbox.w);
    let index = |v: f64, origin: f64, n: usize| {
        (((v - origin) / f_e.cell_size).floor().max(0.0) as usize).min(n - 1)
    };
    let (i0, i1) = (index(bbox.cx - r, f_e.origin[0], f_e.h), index(bbox.cx + r, f_e.origin[0], f_e.h));
    let (j0, j1) = (index(bbox.cy - r, f_e.origin[1], f_e.w), index(bbox.cy + r, f_e.origin[1], f_e.w));
    let (mut total, mut cells) = (0.0, 0usize);
    for i in i0..=i1 {
        for j in j0..=j1 {
            let [x, y] = f_e.cell_center(i, j);
            if !bbox.contains_bev(x, y) {
                continue;
            }
            cells += 1;
            let k = i * f_e.w + j;
            if mask.values[k] {
                let base = k * f_e.c;
                let d: f64 = (0..f_e.c)
                    .map(|ch| (f_e.values[base + ch] - f_m.values[base + ch]).abs())
                    .sum();
                total += d / f_e.c as f64;
            }
        }
    }
    if cells == 0 {
        0.0
    } else {
        total / cells as f64
    }
}

/// Multi-view proposals that no ego proposal overlaps at `eta_ccl` or more
/// and that hold at least `rho` ego points.
pub fn unmatched_valid_set(
    p_e: &ProposalSet,
    p_m: &ProposalSet,
    ego_cloud: &PointCloud,
    eta_ccl: f64,
    rho: usize,
) -> ProposalSet {
    let items = p_m
        .items
        .iter()
        .filter(|m| {
            p_e.items
                .iter()
                .all(|e| rotated_iou_bev(&e.bbox, &m.bbox) < eta_ccl)
                && points_in_box(ego_cloud, &m.bbox).0 >= rho
        })
        .copied()
        .collect();
    ProposalSet::new(p_m.frame_id, p_e.view, items)
}

/// NMS over the ego proposals followed by the unmatched valid set.
pub fn consensus_labels(p_e: &ProposalSet, u: &ProposalSet, eta_ccl: f64) -> ProposalSet {
    let mut union = p_e.clone();
    union.items.extend_from_slice(&u.items);
    nms(&union, eta_ccl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FrameId, Proposal, View};

    fn small() -> BevSpec {
        BevSpec {
            cell_size: 1.0,
            half_extent: 4.0,
        }
    }

    #[test]
    fn empty_cloud_rasterizes_to_zero() {
        let g = bev_rasterize(&PointCloud::default(), &BevSpec::default());
        assert_eq!((g.h, g.w, g.c), (280, 280, 4));
        assert!(g.values.iter().all(|v| *v == 0.0));
        assert_eq!(visibility_mask(&g, 1e-3).visible(), 0);
    }

    #[test]
    fn single_point_single_cell() {
        let g = bev_rasterize(&PointCloud::new(0, vec![[0.2, -1.5, 0.7]]), &small());
        let nonzero: Vec<usize> = (0..g.h * g.w)
            .filter(|k| g.values[k * 4..k * 4 + 4].iter().any(|v| *v != 0.0))
            .collect();
        assert_eq!(nonzero.len(), 1);
        let (i, j) = g.cell_of(0.2, -1.5).unwrap();
        assert_eq!((i, j), (4, 2));
        assert_eq!(g.at(i, j, 0), 2f64.ln());
        assert_eq!(g.at(i, j, 3), 1.0);
        assert_eq!(g.at(i, j, 1), 0.7);
    }

    #[test]
    fn unit_alignment_arithmetic() {
        let spec = BevSpec {
            cell_size: 1.0,
            half_extent: 0.5,
        };
        let mut a = BevGrid::zeros(&spec);
        a.c = 1;
        a.values = vec![3.0];
        let b = BevGrid {
            values: vec![1.0],
            ..a.clone()
        };
        let m = visibility_mask(&a, 1e-3);
        let (l, g) = bev_alignment_loss(&a, &b, &m).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.values, vec![4.0]);
        assert_eq!(bev_alignment_loss(&a, &a, &m).unwrap().0, 0.0);
    }

    #[test]
    fn zero_mu3_or_equal_grids_give_zero_guidance() {
        let g = bev_rasterize(&PointCloud::new(0, vec![[1.0, 1.0, 1.0]]), &small());
        let h = bev_rasterize(&PointCloud::new(0, vec![[1.0, 1.0, 2.0]]), &small());
        assert!(ccl_guidance(&g, &h, 1e-3, 0.0).unwrap().values.iter().all(|v| *v == 0.0));
        assert!(ccl_guidance(&g, &g, 1e-3, 1.5).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = BevGrid::zeros(&small());
        let b = BevGrid::zeros(&BevSpec::default());
        let m = visibility_mask(&a, 1e-3);
        assert!(bev_alignment_loss(&a, &b, &m).is_err());
    }

    #[test]
    fn unmatched_set_conditions() {
        let bx = |cx: f64| Box3D::new(cx, 0.0, 1.0, 4.0, 2.0, 2.0, 0.0).unwrap();
        let pe = ProposalSet::new(FrameId(0), View::Ego, vec![Proposal::new(bx(0.0), 0.9)]);
        let pm = ProposalSet::new(
            FrameId(0),
            View::Multi,
            vec![Proposal::new(bx(0.1), 0.8), Proposal::new(bx(20.0), 0.7), Proposal::new(bx(40.0), 0.6)],
        );
        let pts: Vec<_> = (0..6).map(|i| [20.0 + 0.1 * i as f64, 0.0, 1.0]).collect();
        let cloud = PointCloud::new(0, pts);
        let u = unmatched_valid_set(&pe, &pm, &cloud, 0.3, 5);
        assert_eq!(u.items, vec![Proposal::new(bx(20.0), 0.7)]);
        let empty = ProposalSet::empty(FrameId(0), View::Multi);
        assert!(unmatched_valid_set(&pe, &empty, &cloud, 0.3, 5).is_empty());
        assert_eq!(consensus_labels(&pe, &u, 0.3).len(), 2);
    }
}
