//! Ground-truth evaluation: greedy matching, precision/recall, average
//! precision and range-banded AP. Only evaluation code may consume
//! [`GroundTruth`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotated_iou_bev, Box3D, Proposal, ProposalSet};
use crate::scenesim::GroundTruth;

/// Half-open range bands (m) of the banded breakdown.
pub const RANGE_BANDS: [(f64, f64); 3] = [(0.0, 30.0), (30.0, 50.0), (50.0, 100.0)];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// TP flag per prediction, in input order.
    pub pred_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.pred_tp.iter().filter(|t| **t).count()
    }
}

/// Prediction indices by confidence, descending; ties keep input order.
fn rank(preds: &[Proposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

/// Greedy one-to-one assignment: in confidence order each prediction claims
/// the unmatched ground-truth box of highest IoU, if that IoU is at least
/// `iou_thr`. IoU ties go to the lower ground-truth index.
pub fn match_predictions(preds: &[Proposal], gts: &[Box3D], iou_thr: f64) -> MatchResult {
    let mut pred_tp = vec![false; preds.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in rank(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_matched[j] {
                continue;
            }
            let iou = rotated_iou_bev(&preds[i].bbox, g);
            if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            gt_matched[j] = true;
            pred_tp[i] = true;
        }
    }
    MatchResult {
        pred_tp,
        gt_matched,
    }
}

/// `(precision, recall)` with precision 1 when there are no predictions and
/// recall 1 when there is no ground truth.
pub fn precision_recall(preds: &[Proposal], gts: &[Box3D], iou_thr: f64) -> (f64, f64) {
    let m = match_predictions(preds, gts, iou_thr);
    ratio_pr(m.true_positives(), preds.len(), gts.len())
}

fn ratio_pr(tp: usize, npred: usize, ngt: usize) -> (f64, f64) {
    let p = if npred == 0 { 1.0 } else { tp as f64 / npred as f64 };
    let r = if ngt == 0 { 1.0 } else { tp as f64 / ngt as f64 };
    (p, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean envelope precision at `n` evenly spaced recall levels in [0, 1].
    Sampled(usize),
}

/// AP from pooled `(confidence, is_tp)` detections and the total number of
/// ground-truth boxes. Zero when there is no ground truth.
pub fn ap_from_detections(dets: &mut [(f64, bool)], num_gt: usize, method: ApMethod) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for (k, (_, hit)) in dets.iter().enumerate() {
        tp += *hit as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    match method {
        ApMethod::AllPoint => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                ap += (r - prev_r) * p;
                prev_r = *r;
            }
            ap
        }
        ApMethod::Sampled(n) => {
            let n = n.max(1);
            let levels = (0..n).map(|i| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 });
            let total: f64 = levels
                .map(|lvl| {
                    recall
                        .iter()
                        .position(|r| *r >= lvl - 1e-12)
                        .map_or(0.0, |k| precision[k])
                })
                .sum();
            total / n as f64
        }
    }
}

/// Frame-pooled AP of predictions against their frames' ground truth.
pub fn average_precision_frames(frames: &[(&[Proposal], &[Box3D])], iou_thr: f64) -> f64 {
    let mut dets = Vec::new();
    let mut num_gt = 0;
    for (preds, gts) in frames {
        let m = match_predictions(preds, gts, iou_thr);
        dets.extend(preds.iter().zip(&m.pred_tp).map(|(p, t)| (p.confidence, *t)));
        num_gt += gts.len();
    }
    ap_from_detections(&mut dets, num_gt, ApMethod::AllPoint)
}

pub fn average_precision(preds: &[Proposal], gts: &[Box3D], iou_thr: f64) -> f64 {
    average_precision_frames(&[(preds, gts)], iou_thr)
}

fn in_band(b: &Box3D, band: (f64, f64)) -> bool {
    let r = b.range();
    r >= band.0 && r < band.1
}

/// AP per band, with predictions and ground truth partitioned by box-center
/// range. Bands without ground truth report 0.
pub fn range_banded_ap(
    frames: &[(&[Proposal], &[Box3D])],
    iou_thr: f64,
    bands: &[(f64, f64)],
) -> Vec<BandAp> {
    bands
        .iter()
        .map(|&band| {
            let split: Vec<(Vec<Proposal>, Vec<Box3D>)> = frames
                .iter()
                .map(|(p, g)| {
                    (
                        p.iter().filter(|x| in_band(&x.bbox, band)).copied().collect(),
                        g.iter().filter(|x| in_band(x, band)).copied().collect(),
                    )
                })
                .collect();
            let refs: Vec<(&[Proposal], &[Box3D])> =
                split.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
            let num_gt = split.iter().map(|s| s.1.len()).sum();
            BandAp {
                lo: band.0,
                hi: band.1,
                ap: average_precision_frames(&refs, iou_thr),
                num_gt,
                num_pred: split.iter().map(|s| s.0.len()).sum(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandAp {
    pub lo: f64,
    pub hi: f64,
    /// AP@0.5 of the band; 0 when `num_gt == 0`.
    pub ap: f64,
    pub num_gt: usize,
    pub num_pred: usize,
}

impl BandAp {
    /// Empty bands are excluded from averages.
    pub fn is_empty(&self) -> bool {
        self.num_gt == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_03: f64,
    pub ap_05: f64,
    pub precision_05: f64,
    pub recall_05: f64,
    pub bands: Vec<BandAp>,
    pub num_frames: usize,
    pub num_pred: usize,
    pub num_gt: usize,
}

impl EvalReport {
    /// Mean AP over non-empty bands, if any.
    pub fn mean_band_ap(&self) -> Option<f64> {
        let v: Vec<f64> = self.bands.iter().filter(|b| !b.is_empty()).map(|b| b.ap).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Evaluates per-frame predictions; each set is compared with the ground truth
/// of its own frame.
pub fn evaluate(sets: &[ProposalSet], gt: &GroundTruth) -> EvalReport {
    let frames: Vec<(&[Proposal], &[Box3D])> = sets
        .iter()
        .map(|s| (s.items.as_slice(), gt.get(s.frame_id)))
        .collect();
    let (ap_03, ap_05) = rayon::join(
        || average_precision_frames(&frames, 0.3),
        || average_precision_frames(&frames, 0.5),
    );
    let tallies: Vec<(usize, usize, usize)> = frames
        .par_iter()
        .map(|(p, g)| (match_predictions(p, g, 0.5).true_positives(), p.len(), g.len()))
        .collect();
    let (tp, num_pred, num_gt) = tallies
        .iter()
        .fold((0, 0, 0), |a, t| (a.0 + t.0, a.1 + t.1, a.2 + t.2));
    let (precision_05, recall_05) = ratio_pr(tp, num_pred, num_gt);
    EvalReport {
        ap_03,
        ap_05,
        precision_05,
        recall_05,
        bands: range_banded_ap(&frames, 0.5, &RANGE_BANDS),
        num_frames: sets.len(),
        num_pred,
        num_gt,
    }
}
