//! Small numeric helpers shared by the logistic models.

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sufficient-decrease constant of the step acceptance test.
const ARMIJO: f64 = 1e-4;

/// Gradient descent with step halving: a step is only taken when it lowers the
/// objective by a sufficient amount, so the returned per-epoch losses are
/// non-increasing.
///
/// `objective` returns the loss and its gradient. `scale` holds a per-parameter
/// step multiplier. The returned trace starts with the initial loss and has one
/// entry per epoch after it.
pub fn descend<F>(
    params: &mut [f64],
    scale: &[f64],
    base_step: f64,
    epochs: usize,
    max_halvings: usize,
    mut objective: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    debug_assert_eq!(params.len(), scale.len());
    let (mut loss, mut grad) = objective(params);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("initial loss {loss}")));
    }
    let mut trace = Vec::with_capacity(epochs + 1);
    trace.push(loss);
    let mut step = base_step;
    let mut trial = params.to_vec();
    for epoch in 0..epochs {
        let mut accepted = false;
        for _ in 0..=max_halvings {
            for i in 0..params.len() {
                trial[i] = params[i] - step * scale[i] * grad[i];
            }
            let (l, g) = objective(&trial);
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss(format!("epoch {epoch}: loss {l}")));
            }
            let decrease: f64 = grad
                .iter()
                .zip(scale)
                .map(|(g, s)| s * g * g)
                .sum::<f64>()
                * step
                * ARMIJO;
            if l <= loss - decrease {
                params.copy_from_slice(&trial);
                loss = l;
                grad = g;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            log::debug!("descent stalled at epoch {epoch} (loss {loss})");
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Central finite-difference gradient, used by the gradient-check tests.
pub fn numeric_gradient<F>(params: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn descend_minimizes_quadratic_monotonically() {
        let mut p = vec![3.0, -2.0];
        let trace = descend(&mut p, &[1.0, 1.0], 2.0, 50, 30, |x| {
            let l = (x[0] - 1.0).powi(2) + 4.0 * (x[1] + 0.5).powi(2);
            (l, vec![2.0 * (x[0] - 1.0), 8.0 * (x[1] + 0.5)])
        })
        .unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn descend_reports_non_finite_loss() {
        let mut p = vec![0.0];
        let r = descend(&mut p, &[1.0], 1.0, 3, 3, |_| (f64::NAN, vec![0.0]));
        assert!(matches!(r, Err(Error::NonFiniteLoss(_))));
    }
}
