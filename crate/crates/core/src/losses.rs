//! Imbalance-weighted cross-entropy, the global-local similarity loss, and
//! their weighted sum.
//!
//! Both losses sum over attributes and average over samples. Probabilities
//! must already be clamped to `[PROB_EPS, 1 − PROB_EPS]` by the model.

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::model::PROB_EPS;
use crate::tensor::Tensor;

/// Default weight of the similarity loss.
pub const DEFAULT_ALPHA: f32 = 0.5;

/// Per-attribute imbalance weights `w_j = exp(−r_j)` and occurrence ratios `r_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Tensor,
    pub ratios: Tensor,
}

impl ClassWeights {
    /// All weights one; turns the weighted loss into plain BCE.
    pub fn uniform(n: usize) -> Self {
        ClassWeights {
            weights: Tensor::ones(&[n]),
            ratios: Tensor::zeros(&[n]),
        }
    }
}

pub fn compute_weights(labels: &[LabelVector]) -> Result<ClassWeights> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("class weights need at least one label vector".into()))?;
    let n = first.len();
    let mut counts = vec![0usize; n];
    for l in labels {
        if l.len() != n {
            return Err(Error::InvalidArgument(format!(
                "label vectors of length {} and {n} mixed",
                l.len()
            )));
        }
        for (c, &b) in counts.iter_mut().zip(l.bits()) {
            *c += b as usize;
        }
    }
    let m = labels.len() as f64;
    let ratios: Vec<f32> = counts.iter().map(|&c| (c as f64 / m) as f32).collect();
    let weights = ratios.iter().map(|&r| (-(r as f64)).exp() as f32).collect();
    Ok(ClassWeights {
        weights: Tensor::vector(weights),
        ratios: Tensor::vector(ratios),
    })
}

/// `−(1/M) Σ_i Σ_j w_j (y log p + (1−y) log(1−p))`, accumulated in f64.
pub(crate) fn bce_value(probs: &[f32], targets: &[f32], weights: &[f32]) -> f32 {
    let n = weights.len();
    let rows = (probs.len() / n) as f64;
    let mut total = 0.0f64;
    for (i, (&p, &y)) in probs.iter().zip(targets).enumerate() {
        let (p, y) = (p as f64, y as f64);
        total += weights[i % n] as f64 * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    (-total / rows) as f32
}

fn check_inputs(op: &'static str, probs: &Tensor, targets: &Tensor, n: Option<usize>) -> Result<()> {
    if probs.shape() != targets.shape() || probs.rank() != 2 {
        return Err(Error::shape(op, probs.shape(), targets.shape()));
    }
    if let Some(n) = n {
        if probs.shape()[1] != n {
            return Err(Error::shape(op, probs.shape(), &[n]));
        }
    }
    if let Some(p) = probs
        .data()
        .iter()
        .find(|&&p| !(PROB_EPS..=1.0 - PROB_EPS).contains(&p))
    {
        return Err(Error::InvalidArgument(format!(
            "{op}: probability {p} outside the clamped range"
        )));
    }
    if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!("{op}: targets must be 0 or 1")));
    }
    Ok(())
}

/// Weighted cross-entropy over `M×N` probabilities.
pub fn weighted_cse(probs: &Tensor, targets: &Tensor, weights: &ClassWeights) -> Result<f32> {
    check_inputs("weighted_cse", probs, targets, Some(weights.weights.numel()))?;
    Ok(bce_value(probs.data(), targets.data(), weights.weights.data()))
}

/// Unweighted cross-entropy of similarity scores against targets.
pub fn gl_loss(gl_scores: &Tensor, targets: &Tensor) -> Result<f32> {
    check_inputs("gl_loss", gl_scores, targets, None)?;
    let ones = vec![1.0f32; gl_scores.shape()[1]];
    Ok(bce_value(gl_scores.data(), targets.data(), &ones))
}

pub fn total_loss(cse: f32, gl: f32, alpha: f32) -> Result<f32> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "loss weight alpha must be ≥ 0, got {alpha}"
        )));
    }
    Ok(cse + alpha * gl)
}
