//! Learning-rate schedule, first-order optimizers, and deterministic batch
//! gradient accumulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear warmup from `base_lr · warmup_ratio` to `base_lr`, then cosine
/// decay towards zero over the remaining epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_epochs: usize,
    pub warmup_ratio: f32,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f32 {
        if epoch < self.warmup_epochs {
            let t = epoch as f32 / self.warmup_epochs as f32;
            return self.base_lr * (self.warmup_ratio + (1.0 - self.warmup_ratio) * t);
        }
        let span = self.total_epochs.saturating_sub(self.warmup_epochs).max(1) as f32;
        let t = (epoch - self.warmup_epochs) as f32 / span;
        self.base_lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f32,
    step: u32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f32, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            weight_decay,
            step: 0,
            first: zeros(),
            second,
        }
    }

    /// Applies one update. Decoupled weight decay `θ ← θ − lr·λ·θ` for Adam;
    /// L2 gradient term for SGD.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let wd = self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
            let p = p.data_mut();
            let g = g.data();
            let m = self.first[i].data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for k in 0..p.len() {
                        let grad = g[k] + wd * p[k];
                        m[k] = momentum * m[k] + grad;
                        p[k] -= lr * m[k];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second[i].data_mut();
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for k in 0..p.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                        p[k] -= lr * (update + wd * p[k]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mean loss and mean gradients of `f` over `indices`.
///
/// Items are evaluated in parallel, then summed in index order, so the result
/// does not depend on the thread count.
pub fn batch_mean<F>(indices: &[usize], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(usize) -> Result<(f32, Vec<Tensor>)> + Sync,
{
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts: Vec<(f32, Vec<Tensor>)> = indices.par_iter().map(|&i| f(i)).collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (first_loss, mut sum) = iter.next().expect("non-empty batch");
    let mut loss = first_loss as f64;
    for (l, grads) in iter {
        loss += l as f64;
        for (s, g) in sum.iter_mut().zip(&grads) {
            s.add_assign(g)?;
        }
    }
    let inv = 1.0 / indices.len() as f32;
    for s in &mut sum {
        s.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss / indices.len() as f64, sum))
}
