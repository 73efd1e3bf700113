//! CSV proposal records, `frame_id,view,cx,cy,cz,l,w,h,yaw,confidence`, and
//! ground-truth files, `frame_id,cx,cy,cz,l,w,h,yaw`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{parse_err, parse_f64, read_text, write_text};
use crate::error::Result;
use crate::geometry::{Box3D, FrameId, Proposal, ProposalSet, View};

pub const PROPOSAL_HEADER: &str = "frame_id,view,cx,cy,cz,l,w,h,yaw,confidence";
pub const GT_HEADER: &str = "frame_id,cx,cy,cz,l,w,h,yaw";

fn push_box(s: &mut String, b: &Box3D) {
    let _ = write!(s, "{},{},{},{},{},{},{}", b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw);
}

pub fn proposals_to_csv<'a>(sets: impl IntoIterator<Item = &'a ProposalSet>) -> String {
    let mut s = String::from(PROPOSAL_HEADER);
    s.push('\n');
    for set in sets {
        for p in &set.items {
            let _ = write!(s, "{},{},", set.frame_id, set.view);
            push_box(&mut s, &p.bbox);
            let _ = writeln!(s, ",{}", p.confidence);
        }
    }
    s
}

fn parse_box(f: &[&str], path: &Path, line: usize) -> Result<Box3D> {
    let v = f
        .iter()
        .map(|t| parse_f64(t, path, line))
        .collect::<Result<Vec<f64>>>()?;
    Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
        .map_err(|e| parse_err(path, line, e.to_string()))
}

fn parse_frame(tok: &str, path: &Path, line: usize) -> Result<FrameId> {
    tok.trim()
        .parse::<u32>()
        .map(FrameId)
        .map_err(|_| parse_err(path, line, format!("bad frame id '{tok}'")))
}

/// Parses records back into sets keyed by `(frame, view)`, each keeping file
/// order. Frames without records do not appear.
pub fn proposals_from_csv(text: &str, path: &Path) -> Result<Vec<ProposalSet>> {
    let mut sets: BTreeMap<(FrameId, u8), ProposalSet> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(parse_err(path, n, format!("expected 10 fields, got {}", f.len())));
        }
        let frame = parse_frame(f[0], path, n)?;
        let view: View = f[1].trim().parse().map_err(|_| parse_err(path, n, "bad view"))?;
        let bbox = parse_box(&f[2..9], path, n)?;
        let c = parse_f64(f[9], path, n)?;
        if !(0.0..=1.0).contains(&c) {
            return Err(parse_err(path, n, format!("confidence {c} outside [0, 1]")));
        }
        sets.entry((frame, view as u8))
            .or_insert_with(|| ProposalSet::empty(frame, view))
            .items
            .push(Proposal::new(bbox, c));
    }
    Ok(sets.into_values().collect())
}

pub fn write_proposals<'a>(
    path: &Path,
    sets: impl IntoIterator<Item = &'a ProposalSet>,
) -> Result<()> {
    write_text(path, &proposals_to_csv(sets))
}

pub fn read_proposals(path: &Path) -> Result<Vec<ProposalSet>> {
    proposals_from_csv(&read_text(path)?, path)
}

pub fn boxes_to_csv<'a>(frames: impl IntoIterator<Item = (FrameId, &'a [Box3D])>) -> String {
    let mut s = String::from(GT_HEADER);
    s.push('\n');
    for (frame, boxes) in frames {
        for b in boxes {
            let _ = write!(s, "{frame},");
            push_box(&mut s, b);
            s.push('\n');
        }
    }
    s
}

pub fn boxes_from_csv(text: &str, path: &Path) -> Result<BTreeMap<FrameId, Vec<Box3D>>> {
    let mut out: BTreeMap<FrameId, Vec<Box3D>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(path, n, format!("expected 8 fields, got {}", f.len())));
        }
        let frame = parse_frame(f[0], path, n)?;
        out.entry(frame).or_default().push(parse_box(&f[1..8], path, n)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proposal_round_trip() {
        let b = Box3D::new(1.0 / 3.0, -2.5, 0.8, 4.1, 1.9, 1.6, 2.9).unwrap();
        let sets = vec![
            ProposalSet::new(FrameId(3), View::Ego, vec![Proposal::new(b, 0.125)]),
            ProposalSet::new(
                FrameId(3),
                View::Multi,
                vec![Proposal::new(b, 1.0), Proposal::new(b, 0.01)],
            ),
        ];
        let back = proposals_from_csv(&proposals_to_csv(&sets), Path::new("p")).unwrap();
        assert_eq!(back, sets);
    }

    #[test]
    fn rejects_bad_confidence() {
        let text = format!("{PROPOSAL_HEADER}\n0,ego,0,0,0,1,1,1,0,1.5\n");
        assert!(proposals_from_csv(&text, Path::new("p")).is_err());
    }
}
