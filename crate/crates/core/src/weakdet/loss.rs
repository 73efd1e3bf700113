//! Classification and regression losses of the detector fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::sigmoid;

/// Probabilities are clamped into `[P_EPS, 1 - P_EPS]` before taking logs.
pub const P_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mu1: f64,
    pub mu2: f64,
    /// Weight of the BEV alignment term (ego detector only).
    pub mu3: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu1: 1.0,
            mu2: 1.0,
            mu3: 1.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.mu1, self.mu2, self.mu3].iter().all(|m| *m >= 0.0 && m.is_finite())
            && self.focal_alpha > 0.0
            && self.focal_alpha < 1.0
            && self.focal_gamma >= 0.0
            && self.smooth_l1_beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Focal loss of predicted probability `p` for label `y` (true = positive).
pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_EPS, 1.0 - P_EPS);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Focal loss as a function of the logit `z`, with its derivative in `z`.
pub fn focal_loss_logit(z: f64, y: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z).clamp(P_EPS, 1.0 - P_EPS);
    let loss = focal_loss(p, y, alpha, gamma);
    let d = if y {
        alpha * (1.0 - p).powf(gamma) * (gamma * p * p.ln() - (1.0 - p))
    } else {
        (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * (1.0 - p).ln())
    };
    (loss, d)
}

pub fn smooth_l1(r: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let a = r.abs();
    if a < beta {
        0.5 * r * r / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        r / beta
    } else {
        r.signum()
    }
}
