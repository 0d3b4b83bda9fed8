//! Losses with analytic gradients with respect to their logits.

use crate::ops::sigmoid;
use crate::Real;

/// Smoothing term of the dice ratio.
pub const DICE_EPS: Real = 1.0;

fn softplus(x: Real) -> Real {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Summed sigmoid focal loss over binary targets.
///
/// Returns the loss and its gradient with respect to each logit.
pub fn sigmoid_focal_loss(
    logits: &[Real],
    targets: &[Real],
    alpha: Real,
    gamma: Real,
) -> (Real, Vec<Real>) {
    assert_eq!(logits.len(), targets.len(), "focal loss length mismatch");
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.iter().zip(targets) {
        let p = sigmoid(x);
        // log p and log(1 - p) without cancellation.
        let log_p = -softplus(-x);
        let log_q = -softplus(x);
        if t >= 0.5 {
            let q = 1.0 - p;
            loss += -alpha * q.powf(gamma) * log_p;
            grad.push(alpha * q.powf(gamma) * (gamma * p * log_p - q));
        } else {
            loss += -(1.0 - alpha) * p.powf(gamma) * log_q;
            grad.push((1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q));
        }
    }
    (loss, grad)
}

/// Soft dice loss `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)` with
/// `p = sigmoid(logits)`.
pub fn dice_loss(logits: &[Real], target: &[Real]) -> (Real, Vec<Real>) {
    assert_eq!(logits.len(), target.len(), "dice loss length mismatch");
    let probs: Vec<Real> = logits.iter().map(|&x| sigmoid(x)).collect();
    let inter: Real = probs.iter().zip(target).map(|(p, g)| p * g).sum();
    let union: Real = probs.iter().sum::<Real>() + target.iter().sum::<Real>();
    let num = 2.0 * inter + DICE_EPS;
    let den = union + DICE_EPS;
    let loss = 1.0 - num / den;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let dp = -(2.0 * g * den - num) / (den * den);
            dp * p * (1.0 - p)
        })
        .collect();
    (loss, grad)
}
