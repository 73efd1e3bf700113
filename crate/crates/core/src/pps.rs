//! Progressive proposal stabilizing: a confidence threshold that tightens over
//! iterations and history-weighted NMS against a per-frame memory bank.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms_indices, FrameId, Proposal, ProposalSet, View};
use crate::io::records;
use crate::optim::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub tau_min: f64,
    pub tau_max: f64,
    pub k_tau: f64,
    pub k_lambda: f64,
    pub beta_tau: f64,
    pub beta_lambda: f64,
}

impl ScheduleParams {
    /// Default curve for a run of `iterations`, centered at its midpoint.
    pub fn for_iterations(iterations: usize) -> Self {
        let mid = iterations as f64 / 2.0;
        Self {
            tau_min: 0.01,
            tau_max: 0.20,
            k_tau: 0.5,
            k_lambda: 0.5,
            beta_tau: mid,
            beta_lambda: mid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if unit(self.tau_min)
            && unit(self.tau_max)
            && self.tau_min < self.tau_max
            && self.k_tau > 0.0
            && self.k_lambda > 0.0
            && self.beta_tau.is_finite()
            && self.beta_lambda.is_finite()
        {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule {self:?}")))
        }
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::for_iterations(20)
    }
}

/// Confidence threshold at iteration `t`, `τ_min + (τ_max − τ_min)·σ(k(t − β))`
/// written as a convex combination so the midpoint is exact.
pub fn dynamic_tau(t: i64, p: &ScheduleParams) -> f64 {
    let s = sigmoid(p.k_tau * (t as f64 - p.beta_tau));
    p.tau_min * (1.0 - s) + p.tau_max * s
}

/// Weight of historical proposals at iteration `t`.
pub fn dynamic_lambda(t: i64, p: &ScheduleParams) -> f64 {
    sigmoid(p.k_lambda * (t as f64 - p.beta_lambda))
}

/// Per-frame store of the last stabilized proposals with their
/// un-reweighted confidences. A new entry replaces the old one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBank {
    entries: BTreeMap<FrameId, Vec<Proposal>>,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, frame: FrameId) -> &[Proposal] {
        self.entries.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn insert(&mut self, frame: FrameId, items: Vec<Proposal>) {
        debug_assert!(items.iter().all(|p| (0.0..=1.0).contains(&p.confidence)));
        self.entries.insert(frame, items);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.entries.keys().copied()
    }

    /// Writes the bank as proposal records. Frames with empty entries are not
    /// recorded; they load back as absent, which behaves identically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let sets: Vec<ProposalSet> = self
            .entries
            .iter()
            .map(|(f, v)| ProposalSet::new(*f, View::Multi, v.clone()))
            .collect();
        records::write_proposals(path, &sets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bank = Self::new();
        for set in records::read_proposals(path)? {
            bank.insert(set.frame_id, set.items);
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stabilized {
    /// Survivors with reweighted confidences.
    pub labels: ProposalSet,
    /// The same survivors with their original confidences, for the bank.
    pub stored: Vec<Proposal>,
}

/// One frame of stabilization at iteration `t`: prune the current set at
/// `tau`, reweight current by `1 - λ_t` and history by `λ_t`, then NMS the
/// union (current first, so ties favor current proposals).
pub fn stabilize_with_tau(
    current: &ProposalSet,
    history: &[Proposal],
    t: i64,
    tau: f64,
    params: &ScheduleParams,
    eta: f64,
) -> Stabilized {
    let lambda = dynamic_lambda(t, params);
    let kept: Vec<&Proposal> = current.items.iter().filter(|p| p.confidence >= tau).collect();
    let original: Vec<Proposal> = kept.iter().map(|p| **p).chain(history.iter().copied()).collect();
    let weighted: Vec<Proposal> = kept
        .iter()
        .map(|p| Proposal::new(p.bbox, (1.0 - lambda) * p.confidence))
        .chain(history.iter().map(|h| Proposal::new(h.bbox, lambda * h.confidence)))
        .collect();
    let survivors = nms_indices(&weighted, eta);
    Stabilized {
        labels: ProposalSet::new(
            current.frame_id,
            current.view,
            survivors.iter().map(|&i| weighted[i]).collect(),
        ),
        stored: survivors.iter().map(|&i| original[i]).collect(),
    }
}

/// [`stabilize_with_tau`] at the scheduled threshold, updating `bank`.
pub fn stabilize(
    current: &ProposalSet,
    bank: &mut MemoryBank,
    t: i64,
    params: &ScheduleParams,
    eta: f64,
) -> ProposalSet {
    let out = stabilize_with_tau(
        current,
        bank.get(current.frame_id),
        t,
        dynamic_tau(t, params),
        params,
        eta,
    );
    bank.insert(current.frame_id, out.stored);
    out.labels
}
