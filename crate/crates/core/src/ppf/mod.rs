//! Proposal purifying filter: a logistic instance classifier trained on the
//! confidence extremes of the multi-view detector's own proposals, then used
//! to drop unreliable proposals from either view.

mod features;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{symmetric_eigenvalues, InstanceFeatures, FEATURE_DIM, FEATURE_NAMES};

use crate::error::{Error, Result};
use crate::geometry::{points_in_box, Box3D, PointCloud, Proposal, ProposalSet};
use crate::io::checkpoint::ParamMap;
use crate::optim::{descend, dot, sigmoid};

/// Keep threshold on the classifier score.
pub const KEEP_THRESHOLD: f64 = 0.5;

/// Points of `cloud` inside `bbox`, in box-local coordinates.
pub fn crop(cloud: &PointCloud, bbox: &Box3D) -> PointCloud {
    let (_, idx) = points_in_box(cloud, bbox);
    let points = idx.into_iter().map(|i| bbox.to_local(cloud.points[i])).collect();
    PointCloud::new(cloud.source_agent, points)
}

/// Model input of one proposal.
pub fn proposal_features(cloud: &PointCloud, bbox: &Box3D) -> [f64; FEATURE_DIM] {
    InstanceFeatures::from_local(&crop(cloud, bbox).points, bbox).to_vector()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelfSupSets {
    pub negatives: Vec<(Proposal, PointCloud)>,
    pub positives: Vec<(Proposal, PointCloud)>,
}

impl SelfSupSets {
    /// Adds the sets of another frame.
    pub fn extend(&mut self, other: SelfSupSets) {
        self.negatives.extend(other.negatives);
        self.positives.extend(other.positives);
    }

    pub fn check(&self) -> Result<()> {
        if self.negatives.is_empty() || self.positives.is_empty() {
            return Err(Error::InsufficientSupervision {
                negatives: self.negatives.len(),
                positives: self.positives.len(),
            });
        }
        Ok(())
    }
}

/// Splits one frame's proposals into low (`c <= c_low`) and high
/// (`c >= c_high`) confidence sets paired with their crops; the middle band is
/// discarded. Errors when either side is empty.
pub fn select_training_sets(
    proposals: &ProposalSet,
    cloud: &PointCloud,
    c_low: f64,
    c_high: f64,
) -> Result<SelfSupSets> {
    let sets = split_by_confidence(proposals, cloud, c_low, c_high)?;
    sets.check()?;
    Ok(sets)
}

/// Like [`select_training_sets`] but allows empty sides, for pooling frames.
pub fn split_by_confidence(
    proposals: &ProposalSet,
    cloud: &PointCloud,
    c_low: f64,
    c_high: f64,
) -> Result<SelfSupSets> {
    if !(0.0..=1.0).contains(&c_low) || !(0.0..=1.0).contains(&c_high) || c_low >= c_high {
        return Err(Error::InvalidInput(format!(
            "need 0 <= c_low < c_high <= 1, got {c_low}, {c_high}"
        )));
    }
    let mut sets = SelfSupSets::default();
    for p in &proposals.items {
        if p.confidence <= c_low {
            sets.negatives.push((*p, crop(cloud, &p.bbox)));
        } else if p.confidence >= c_high {
            sets.positives.push((*p, crop(cloud, &p.bbox)));
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpfClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Standardization applied before the linear model.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub trained: bool,
    /// Training loss before the first epoch and after each epoch.
    #[serde(skip)]
    pub loss_trace: Vec<f64>,
}

impl PpfClassifier {
    /// Untrained identity-standardized model with the given linear part.
    pub fn from_linear(weights: Vec<f64>, bias: f64) -> Self {
        let d = weights.len();
        Self {
            weights,
            bias,
            feature_mean: vec![0.0; d],
            feature_std: vec![1.0; d],
            trained: true,
            loss_trace: Vec::new(),
        }
    }

    pub fn score_features(&self, x: &[f64]) -> f64 {
        let z: f64 = x
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .zip(&self.weights)
            .map(|(((x, m), s), w)| w * (x - m) / s)
            .sum();
        sigmoid(z + self.bias)
    }

    /// Score `q` of a proposal box on `cloud`.
    pub fn score(&self, cloud: &PointCloud, bbox: &Box3D) -> f64 {
        self.score_features(&proposal_features(cloud, bbox))
    }

    pub fn to_params(&self) -> ParamMap {
        let mut m = ParamMap::new();
        m.insert("weights", self.weights.clone());
        m.insert("bias", vec![self.bias]);
        m.insert("feature_mean", self.feature_mean.clone());
        m.insert("feature_std", self.feature_std.clone());
        m
    }

    pub fn from_params(m: &ParamMap) -> Result<Self> {
        let weights = m.vector("weights", FEATURE_DIM)?;
        let feature_mean = m.vector("feature_mean", FEATURE_DIM)?;
        let feature_std = m.vector("feature_std", FEATURE_DIM)?;
        if feature_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidInput("feature_std must be positive".into()));
        }
        Ok(Self {
            weights,
            bias: m.scalar("bias")?,
            feature_mean,
            feature_std,
            trained: true,
            loss_trace: Vec::new(),
        })
    }
}

/// Mean binary cross-entropy of a logistic model `params = [w.., b]` and its
/// gradient.
pub fn logistic_bce(params: &[f64], xs: &[Vec<f64>], ys: &[f64]) -> (f64, Vec<f64>) {
    let d = params.len() - 1;
    let n = xs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(&params[..d], x) + params[d];
        // log(1 + e^z) − y·z, computed without overflow.
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        let r = sigmoid(z) - y;
        for k in 0..d {
            grad[k] += r * x[k];
        }
        grad[d] += r;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

fn standardize(rows: &[[f64; FEATURE_DIM]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; FEATURE_DIM];
    for r in rows {
        for k in 0..FEATURE_DIM {
            mean[k] += r[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; FEATURE_DIM];
    for r in rows {
        for k in 0..FEATURE_DIM {
            std[k] += (r[k] - mean[k]).powi(2);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s < 1e-9 {
            *s = 1.0;
        }
    }
    (mean, std)
}

/// Fits the classifier by step-halving gradient descent on the mean BCE over
/// all crops (positives y=1, negatives y=0).
pub fn train_ppf(sets: &SelfSupSets, epochs: usize, step: f64) -> Result<PpfClassifier> {
    sets.check()?;
    let labelled: Vec<(&Proposal, &PointCloud, f64)> = sets
        .positives
        .iter()
        .map(|(p, c)| (p, c, 1.0))
        .chain(sets.negatives.iter().map(|(p, c)| (p, c, 0.0)))
        .collect();
    let raw: Vec<[f64; FEATURE_DIM]> = labelled
        .par_iter()
        .map(|(p, c, _)| InstanceFeatures::from_local(&c.points, &p.bbox).to_vector())
        .collect();
    let ys: Vec<f64> = labelled.iter().map(|l| l.2).collect();
    let (mean, std) = standardize(&raw);
    let xs: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| (0..FEATURE_DIM).map(|k| (r[k] - mean[k]) / std[k]).collect())
        .collect();

    let mut params = vec![0.0; FEATURE_DIM + 1];
    let scale = vec![1.0; FEATURE_DIM + 1];
    let trace = descend(&mut params, &scale, step, epochs, 30, |p| logistic_bce(p, &xs, &ys))
        .map_err(|e| e.in_stage("ppf training"))?;
    log::debug!(
        "ppf trained on {}+/{}- crops, loss {:.4} -> {:.4}",
        sets.positives.len(),
        sets.negatives.len(),
        trace[0],
        trace[trace.len() - 1]
    );
    let bias = params.pop().unwrap_or(0.0);
    Ok(PpfClassifier {
        weights: params,
        bias,
        feature_mean: mean,
        feature_std: std,
        trained: true,
        loss_trace: trace,
    })
}

/// Keeps proposals whose score on their crop is at least 0.5, preserving order
/// and confidences.
pub fn ppf_filter(clf: &PpfClassifier, proposals: &ProposalSet, cloud: &PointCloud) -> ProposalSet {
    debug_assert!(clf.trained, "ppf_filter on an untrained classifier");
    let keep: Vec<bool> = proposals
        .items
        .par_iter()
        .map(|p| clf.score(cloud, &p.bbox) >= KEEP_THRESHOLD)
        .collect();
    let items = proposals
        .items
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(*p))
        .collect();
    ProposalSet::new(proposals.frame_id, proposals.view, items)
}
