//! Detector initialization from positional priors and refitting against
//! pseudo labels.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{focal_loss_logit, smooth_l1, smooth_l1_grad, LossWeights};
use super::{extract_candidates, make_candidate, Candidate, DetectorModel, Observation};
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou_bev, Box3D, Point3, ProposalSet};
use crate::optim::{descend, dot};
use crate::ppf::FEATURE_DIM;
use crate::rng::{self, Stream};

/// Per-candidate auxiliary loss weights for frame `i`, given the candidates'
/// refined boxes.
pub type Guidance<'a> = dyn Fn(usize, &[Box3D]) -> Vec<f64> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub epochs: usize,
    pub scorer_step: f64,
    pub box_step: f64,
    /// IoU at which a candidate counts as matching a pseudo box.
    pub match_iou: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            scorer_step: 2.0,
            box_step: 0.5,
            match_iou: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSettings {
    pub epochs: usize,
    /// Footprint inflation (m) when matching clusters to priors.
    pub prior_margin: f64,
    pub negatives_per_positive: f64,
    pub min_negatives: usize,
}

impl Default for InitSettings {
    fn default() -> Self {
        Self {
            epochs: 200,
            prior_margin: 0.5,
            negatives_per_positive: 3.0,
            min_negatives: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub model: DetectorModel,
    /// Total loss before the first epoch and after each epoch.
    pub loss_trace: Vec<f64>,
    pub candidates: usize,
    pub matched: usize,
}

/// Weighted mean focal loss over logistic scores. `params = [w.., b]`; sample
/// `i` enters with weight `wts[i]`.
pub fn scorer_objective(
    params: &[f64],
    xs: &[[f64; FEATURE_DIM]],
    ys: &[bool],
    wts: &[f64],
    alpha: f64,
    gamma: f64,
) -> (f64, Vec<f64>) {
    let d = params.len() - 1;
    let n = xs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for ((x, &y), &wt) in xs.iter().zip(ys).zip(wts) {
        if wt == 0.0 {
            continue;
        }
        let z = dot(&params[..d], x) + params[d];
        let (l, dz) = focal_loss_logit(z, y, alpha, gamma);
        loss += wt * l;
        for k in 0..d {
            grad[k] += wt * dz * x[k];
        }
        grad[d] += wt * dz;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Mean smooth-L1 of the corrected `(l, w, h, z)` against targets.
/// `params` holds `(scale, bias)` pairs; `obs[i]` the observed quantities.
pub fn box_objective(
    params: &[f64],
    obs: &[[f64; 4]],
    targets: &[[f64; 4]],
    beta: f64,
) -> (f64, Vec<f64>) {
    let n = obs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; 8];
    for (o, t) in obs.iter().zip(targets) {
        for k in 0..4 {
            let r = params[2 * k] * o[k] + params[2 * k + 1] - t[k];
            loss += smooth_l1(r, beta);
            let g = smooth_l1_grad(r, beta);
            grad[2 * k] += g * o[k];
            grad[2 * k + 1] += g;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

fn box_row(b: &Box3D) -> [f64; 4] {
    [b.l, b.w, b.h, b.cz]
}

fn flat_offsets(m: &DetectorModel) -> Vec<f64> {
    m.box_offset.iter().flatten().copied().collect()
}

fn set_offsets(m: &mut DetectorModel, p: &[f64]) {
    for k in 0..4 {
        m.box_offset[k] = [p[2 * k], p[2 * k + 1]];
    }
}

struct Batch {
    xs: Vec<[f64; FEATURE_DIM]>,
    ys: Vec<bool>,
    wts: Vec<f64>,
    reg_obs: Vec<[f64; 4]>,
    reg_targets: Vec<[f64; 4]>,
}

/// Runs both descents and returns the summed per-epoch trace.
fn optimize(
    model: &mut DetectorModel,
    batch: &Batch,
    weights: &LossWeights,
    epochs: usize,
    scorer_step: f64,
    box_step: f64,
) -> Result<Vec<f64>> {
    let (alpha, gamma) = (weights.focal_alpha, weights.focal_gamma);
    let mut sp: Vec<f64> = model.scorer_weights.clone();
    sp.push(model.scorer_bias);
    let ones = vec![1.0; sp.len()];
    let scorer_trace = descend(&mut sp, &ones, scorer_step, epochs, 30, |p| {
        scorer_objective(p, &batch.xs, &batch.ys, &batch.wts, alpha, gamma)
    })?;
    model.scorer_bias = sp.pop().unwrap_or(0.0);
    model.scorer_weights = sp;

    let box_trace = if batch.reg_obs.is_empty() {
        log::warn!("no candidate matched a pseudo label; box correction left unchanged");
        vec![0.0; epochs + 1]
    } else {
        let mut bp = flat_offsets(model);
        let mu2 = weights.mu2;
        let beta = weights.smooth_l1_beta;
        let t = descend(&mut bp, &[1.0; 8], box_step, epochs, 30, |p| {
            let (l, g) = box_objective(p, &batch.reg_obs, &batch.reg_targets, beta);
            (mu2 * l, g.into_iter().map(|v| mu2 * v).collect())
        })?;
        set_offsets(model, &bp);
        t
    };
    Ok(scorer_trace
        .iter()
        .zip(&box_trace)
        .map(|(a, b)| a + b)
        .collect())
}

/// Refits the scorer and the box correction against per-frame pseudo labels.
///
/// Every cluster candidate of every observation is labelled once, up front:
/// positive when its refined box reaches `match_iou` with some pseudo box,
/// which then also provides its regression target. The scorer minimizes the
/// mean focal loss, each sample weighted by `mu1` plus its guidance value when
/// `guidance` is given; the correction minimizes `mu2` times the mean
/// smooth-L1 over matched pairs.
pub fn fit_detector(
    model: &DetectorModel,
    pseudo: &[ProposalSet],
    observations: &[Observation],
    weights: &LossWeights,
    settings: &FitSettings,
    guidance: Option<&Guidance<'_>>,
) -> Result<FitOutcome> {
    if settings.epochs == 0 {
        return Err(Error::InvalidInput("fit_detector needs at least one epoch".into()));
    }
    if pseudo.len() != observations.len() {
        return Err(Error::InvalidInput(format!(
            "{} pseudo-label sets for {} observations",
            pseudo.len(),
            observations.len()
        )));
    }
    if let Some((p, o)) = pseudo
        .iter()
        .zip(observations)
        .find(|(p, o)| p.frame_id != o.frame_id)
    {
        return Err(Error::InvalidInput(format!(
            "pseudo labels of frame {} paired with observation {}",
            p.frame_id, o.frame_id
        )));
    }
    model.validate()?;

    type Labelled = (Candidate, Option<Box3D>, f64);
    let per_frame: Vec<Vec<Labelled>> = observations
        .par_iter()
        .zip(pseudo)
        .enumerate()
        .map(|(i, (obs, labels))| {
            let cands = extract_candidates(model, obs);
            let refined: Vec<Box3D> = cands.iter().map(|c| model.refine(c)).collect();
            let aux = match guidance {
                Some(g) => {
                    let v = g(i, &refined);
                    assert_eq!(v.len(), refined.len(), "guidance length mismatch");
                    v
                }
                None => vec![0.0; refined.len()],
            };
            cands
                .into_iter()
                .zip(&refined)
                .zip(aux)
                .map(|((c, r), a)| {
                    let best = labels
                        .boxes()
                        .map(|b| (rotated_iou_bev(r, b), b))
                        .filter(|(iou, _)| *iou >= settings.match_iou)
                        .max_by(|x, y| x.0.total_cmp(&y.0))
                        .map(|(_, b)| *b);
                    (c, best, a)
                })
                .collect()
        })
        .collect();

    let mut batch = Batch {
        xs: Vec::new(),
        ys: Vec::new(),
        wts: Vec::new(),
        reg_obs: Vec::new(),
        reg_targets: Vec::new(),
    };
    for (c, target, aux) in per_frame.iter().flatten() {
        batch.xs.push(model.standardized(&c.features));
        batch.ys.push(target.is_some());
        batch.wts.push(weights.mu1 + aux);
        if let Some(t) = target {
            batch.reg_obs.push(box_row(&c.observed));
            batch.reg_targets.push(box_row(t));
        }
    }
    let candidates = batch.xs.len();
    let matched = batch.reg_obs.len();

    let mut out = model.clone();
    let trace = optimize(
        &mut out,
        &batch,
        weights,
        settings.epochs,
        settings.scorer_step,
        settings.box_step,
    )
    .map_err(|e| e.in_stage("detector fit"))?;
    Ok(FitOutcome {
        model: out,
        loss_trace: trace,
        candidates,
        matched,
    })
}

/// A random compact point blob resting on the ground, seen from the origin.
fn synthetic_negative(seed: u64, index: u64, model: &DetectorModel) -> Option<Candidate> {
    let mut rng = rng::stream(seed, Stream::Negatives, index, 0);
    let range: f64 = rng.random_range(5.0..60.0);
    let bearing: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let (cx, cy) = (range * bearing.cos(), range * bearing.sin());
    let ext = [
        rng.random_range(0.2..3.0),
        rng.random_range(0.2..3.0),
        rng.random_range(0.4..3.0),
    ];
    let yaw: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let lo = (model.min_cluster_points as f64).ln();
    let count = rng.random_range(lo..(400f64).ln()).exp().round() as usize;
    let filled = rng.random_bool(0.5);
    let (s, c) = yaw.sin_cos();
    let pts: Vec<Point3> = (0..count)
        .map(|_| {
            let mut u: [f64; 3] = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.0..1.0),
            ];
            if !filled {
                // Snap to a random side face.
                let k = rng.random_range(0..2);
                u[k] = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
            }
            let (x, y) = (u[0] * ext[0], u[1] * ext[1]);
            [cx + c * x - s * y, cy + s * x + c * y, u[2] * ext[2]]
        })
        .filter(|p| p[2] >= model.ground_threshold)
        .collect();
    (pts.len() >= model.min_cluster_points)
        .then(|| make_candidate(&pts, &[[0.0, 0.0, 1.9]]))
}

fn standardization(rows: &[[f64; FEATURE_DIM]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; FEATURE_DIM];
    for r in rows {
        for k in 0..FEATURE_DIM {
            mean[k] += r[k] / n;
        }
    }
    let mut std = vec![0.0; FEATURE_DIM];
    for r in rows {
        for k in 0..FEATURE_DIM {
            std[k] += (r[k] - mean[k]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-18 { s.sqrt() } else { 1.0 };
    }
    (mean, std)
}

/// Trains a detector from communicated-agent boxes only. For every prior, the
/// largest cluster whose observed center falls inside the prior footprint
/// (inflated by `prior_margin`) becomes a positive with that prior as its box
/// target; negatives are synthetic blobs.
pub fn initialize_detector(
    base: &DetectorModel,
    observations: &[Observation],
    priors: &[Vec<Box3D>],
    weights: &LossWeights,
    fit: &FitSettings,
    init: &InitSettings,
    seed: u64,
) -> Result<DetectorModel> {
    if priors.len() != observations.len() {
        return Err(Error::InvalidInput("one prior list per observation required".into()));
    }
    base.validate()?;
    let positives: Vec<(Candidate, Box3D)> = observations
        .par_iter()
        .zip(priors)
        .map(|(obs, pr)| {
            let cands = extract_candidates(base, obs);
            pr.iter()
                .filter_map(|p| {
                    let grown = Box3D {
                        l: p.l + 2.0 * init.prior_margin,
                        w: p.w + 2.0 * init.prior_margin,
                        ..*p
                    };
                    cands
                        .iter()
                        .filter(|c| grown.contains_bev(c.observed.cx, c.observed.cy))
                        .max_by_key(|c| c.num_points)
                        .map(|c| (c.clone(), *p))
                })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect();
    let want = ((positives.len() as f64 * init.negatives_per_positive).ceil() as usize)
        .max(init.min_negatives);
    let negatives: Vec<Candidate> = (0..(want as u64 * 4))
        .into_par_iter()
        .filter_map(|i| synthetic_negative(seed, i, base))
        .collect::<Vec<_>>()
        .into_iter()
        .take(want)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InsufficientSupervision {
            negatives: negatives.len(),
            positives: positives.len(),
        }
        .in_stage("detector initialization"));
    }

    let raw: Vec<[f64; FEATURE_DIM]> = positives
        .iter()
        .map(|(c, _)| c.features)
        .chain(negatives.iter().map(|c| c.features))
        .collect();
    let (mean, std) = standardization(&raw);
    let mut model = DetectorModel {
        feature_mean: mean,
        feature_std: std,
        ..base.clone()
    };
    let batch = Batch {
        xs: raw.iter().map(|r| model.standardized(r)).collect(),
        ys: (0..raw.len()).map(|i| i < positives.len()).collect(),
        wts: vec![weights.mu1.max(f64::MIN_POSITIVE); raw.len()],
        reg_obs: positives.iter().map(|(c, _)| box_row(&c.observed)).collect(),
        reg_targets: positives.iter().map(|(_, p)| box_row(p)).collect(),
    };
    let trace = optimize(
        &mut model,
        &batch,
        weights,
        init.epochs,
        fit.scorer_step,
        fit.box_step,
    )
    .map_err(|e| e.in_stage("detector initialization"))?;
    log::info!(
        "detector initialized from {} positives and {} synthetic negatives (loss {:.4} -> {:.4})",
        positives.len(),
        negatives.len(),
        trace[0],
        trace[trace.len() - 1]
    );
    Ok(model)
}
