//! Victim model training on true labels.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{compute_weights, ClassWeights, DEFAULT_ALPHA};
use crate::model::{forward_nodes, ParModel};
use crate::optim::{batch_mean, LrSchedule, Optimizer, OptimizerKind};
use crate::rng::rng_stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_epochs: usize,
    pub warmup_ratio: f32,
    pub weight_decay: f32,
    pub alpha: f32,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            lr: 8e-3,
            warmup_epochs: 5,
            warmup_ratio: 0.01,
            weight_decay: 1e-4,
            alpha: DEFAULT_ALPHA,
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.alpha >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr, alpha and weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 1]",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            warmup_ratio: self.warmup_ratio,
            total_epochs: self.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
}

/// CSV with header `epoch,lr,loss`.
pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,loss\n");
    for r in curve {
        out.push_str(&format!("{},{:.8},{:.8}\n", r.epoch, r.lr, r.loss));
    }
    out
}

/// Shuffled batches of sample indices for one epoch.
pub(crate) fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_stream(seed, epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains every model weight with the weighted cross-entropy plus `α` times
/// the similarity loss against true labels.
pub fn train_victim(model: &mut ParModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if data.schema.len() != model.config.attribute_count {
        return Err(Error::Mismatch(format!(
            "dataset has {} attributes, model {}",
            data.schema.len(),
            model.config.attribute_count
        )));
    }
    let weights = compute_weights(&data.labels())?;
    let ones = ClassWeights::uniform(model.config.attribute_count);
    let targets: Vec<Tensor> = data.samples.iter().map(|s| Tensor::vector(s.labels.to_f32())).collect();
    let named = model.params.named();
    let shapes: Vec<&[usize]> = named.iter().map(|(_, t)| t.shape()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay, &shapes);
    let schedule = cfg.schedule();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut total = 0.0f64;
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        for (b, batch) in batches.iter().enumerate() {
            let (loss, grads) = batch_mean(batch, |i| {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true);
                let x = g.constant(data.samples[i].image.clone());
                let out = forward_nodes(&mut g, &model.config, &p, x, None)?;
                let cse = g.bce(out.probs, &targets[i], &weights.weights)?;
                let gl = g.bce(out.gl_scores, &targets[i], &ones.weights)?;
                let gl = g.scale(gl, cfg.alpha);
                let loss = g.add(cse, gl)?;
                let mut grads = g.backward(loss)?;
                let flat = p
                    .named()
                    .iter()
                    .map(|(_, &id)| grads.take(id).expect("parameter gradient"))
                    .collect();
                Ok((g.value(loss).item(), flat))
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: loss as f32,
                });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut model.params.values_mut(), &grads, lr)?;
        }
        let mean = total / data.len() as f64;
        log::info!("victim epoch {epoch}: lr {lr:.6} loss {mean:.6}");
        curve.push(EpochRecord { epoch, lr, loss: mean });
    }
    Ok(curve)
}
