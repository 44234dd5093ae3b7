//! Input filter and text-side prompt offsets trained to undo a fixed noise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::{check_noise_fits, create_dir, noise_hash, read_json, write_json};
use crate::attack::{apply_noise, Perturbation};
use crate::data::Dataset;
use crate::dtsr;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{compute_weights, ClassWeights, DEFAULT_ALPHA};
use crate::model::{forward_nodes, ForwardOutput, ParModel};
use crate::optim::{batch_mean, LrSchedule, Optimizer, OptimizerKind};
use crate::tensor::Tensor;
use crate::train::{epoch_batches, EpochRecord};

pub const FILTER_KERNEL: usize = 3;

/// `3×3` same-padded convolution over the image channels, optionally residual.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub residual: bool,
}

impl FilterParams {
    /// Zero kernel and bias with a residual connection: the identity map.
    pub fn identity(channels: usize) -> Self {
        FilterParams {
            kernel: Tensor::zeros(&[channels, channels, FILTER_KERNEL, FILTER_KERNEL]),
            bias: Tensor::zeros(&[channels]),
            residual: true,
        }
    }
}

/// Offsets added to the attribute embeddings before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams {
    pub offsets: Tensor,
}

impl PromptParams {
    pub fn zeros(model: &ParModel) -> Self {
        PromptParams {
            offsets: Tensor::zeros(&model.prompt_shape()),
        }
    }
}

/// `clamp(x + conv(x), 0, 1)` with the residual, `clamp(conv(x), 0, 1)` without.
pub fn filter_image(x: &Tensor, f: &FilterParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let k = g.constant(f.kernel.clone());
    let b = g.constant(f.bias.clone());
    let out = filter_node(&mut g, x, k, b, f.residual)?;
    Ok(g.value(out).clone())
}

fn filter_node(g: &mut Graph, x: NodeId, kernel: NodeId, bias: NodeId, residual: bool) -> Result<NodeId> {
    let conv = g.conv2d_same(x, kernel, bias)?;
    let y = if residual { g.add(x, conv)? } else { conv };
    Ok(g.clamp(y, 0.0, 1.0))
}

/// Optional noise, then the filter, then the model with prompt offsets.
pub fn defended_forward(
    model: &ParModel,
    x: &Tensor,
    eta: Option<&Perturbation>,
    filter: &FilterParams,
    prompt: &PromptParams,
) -> Result<ForwardOutput> {
    let x = match eta {
        Some(eta) => apply_noise(x, eta)?,
        None => x.clone(),
    };
    let filtered = filter_image(&x, filter)?;
    model.forward(&filtered, Some(&prompt.offsets))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_epochs: usize,
    pub warmup_ratio: f32,
    pub weight_decay: f32,
    pub alpha: f32,
    pub optimizer: OptimizerKind,
    /// Train the prompt offsets; the filter is always trained.
    pub train_prompt: bool,
    pub residual: bool,
    /// Also train on the clean version of every image.
    pub clean_replay: bool,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1.5e-2,
            warmup_epochs: 2,
            warmup_ratio: 0.01,
            weight_decay: 1e-4,
            alpha: DEFAULT_ALPHA,
            optimizer: OptimizerKind::adam(),
            train_prompt: true,
            residual: true,
            clean_replay: true,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("defense batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.alpha >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "defense lr, alpha and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            warmup_ratio: self.warmup_ratio,
            total_epochs: self.epochs,
        }
    }
}

/// Trained defense with the noise it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Defense {
    pub filter: FilterParams,
    pub prompt: PromptParams,
    pub config: DefenseConfig,
    pub noise_hash: String,
    pub trace: Vec<EpochRecord>,
}

impl Defense {
    pub fn identity(model: &ParModel) -> Self {
        Defense {
            filter: FilterParams::identity(model.config.channels),
            prompt: PromptParams::zeros(model),
            config: DefenseConfig::default(),
            noise_hash: String::new(),
            trace: Vec::new(),
        }
    }

    pub fn forward(&self, model: &ParModel, x: &Tensor, eta: Option<&Perturbation>) -> Result<ForwardOutput> {
        defended_forward(model, x, eta, &self.filter, &self.prompt)
    }
}

/// Fits filter and prompt to minimize the true-label loss on noisy images.
/// Neither the model nor the noise is written.
pub fn train_defense(model: &ParModel, eta: &Perturbation, data: &Dataset, cfg: &DefenseConfig) -> Result<Defense> {
    cfg.validate()?;
    check_noise_fits(eta, &model.config)?;
    if data.is_empty() {
        return Err(Error::Dataset("defense dataset is empty".into()));
    }
    let weights = compute_weights(&data.labels())?;
    let ones = ClassWeights::uniform(model.config.attribute_count);
    let mut inputs: Vec<Tensor> = data
        .samples
        .iter()
        .map(|s| apply_noise(&s.image, eta))
        .collect::<Result<_>>()?;
    let mut targets: Vec<Tensor> = data.samples.iter().map(|s| Tensor::vector(s.labels.to_f32())).collect();
    if cfg.clean_replay {
        inputs.extend(data.samples.iter().map(|s| s.image.clone()));
        targets.extend_from_within(..data.len());
    }

    let mut filter = FilterParams::identity(model.config.channels);
    filter.residual = cfg.residual;
    let mut prompt = PromptParams::zeros(model);
    let mut shapes: Vec<&[usize]> = vec![filter.kernel.shape(), filter.bias.shape()];
    if cfg.train_prompt {
        shapes.push(prompt.offsets.shape());
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay, &shapes);
    let schedule = cfg.schedule();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut total = 0.0f64;
        for (b, batch) in epoch_batches(inputs.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let (loss, grads) = batch_mean(batch, |i| {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, false);
                let x = g.constant(inputs[i].clone());
                let k = g.param(filter.kernel.clone());
                let fb = g.param(filter.bias.clone());
                let off = if cfg.train_prompt {
                    g.param(prompt.offsets.clone())
                } else {
                    g.constant(prompt.offsets.clone())
                };
                let y = filter_node(&mut g, x, k, fb, filter.residual)?;
                let out = forward_nodes(&mut g, &model.config, &p, y, Some(off))?;
                let cse = g.bce(out.probs, &targets[i], &weights.weights)?;
                let gl = g.bce(out.gl_scores, &targets[i], &ones.weights)?;
                let gl = g.scale(gl, cfg.alpha);
                let loss = g.add(cse, gl)?;
                let mut grads = g.backward(loss)?;
                let mut flat = vec![
                    grads.take(k).expect("kernel gradient"),
                    grads.take(fb).expect("bias gradient"),
                ];
                if cfg.train_prompt {
                    flat.push(grads.take(off).expect("prompt gradient"));
                }
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
            let mut params: Vec<&mut Tensor> = vec![&mut filter.kernel, &mut filter.bias];
            if cfg.train_prompt {
                params.push(&mut prompt.offsets);
            }
            opt.step(&mut params, &grads, lr)?;
        }
        let mean = total / inputs.len() as f64;
        log::info!("defense epoch {epoch}: lr {lr:.6} loss {mean:.6}");
        trace.push(EpochRecord { epoch, lr, loss: mean });
    }
    Ok(Defense {
        filter,
        prompt,
        config: cfg.clone(),
        noise_hash: noise_hash(eta),
        trace,
    })
}

const DEFENSE_FILE: &str = "defense.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefenseMeta {
    noise_hash: String,
    residual: bool,
    config: DefenseConfig,
    trace: Vec<EpochRecord>,
}

pub fn save_defense(dir: &Path, d: &Defense) -> Result<()> {
    create_dir(dir)?;
    dtsr::save_tensor(&dir.join("filter_kernel.dtsr"), &d.filter.kernel)?;
    dtsr::save_tensor(&dir.join("filter_bias.dtsr"), &d.filter.bias)?;
    dtsr::save_tensor(&dir.join("prompt_offsets.dtsr"), &d.prompt.offsets)?;
    write_json(
        &dir.join(DEFENSE_FILE),
        &DefenseMeta {
            noise_hash: d.noise_hash.clone(),
            residual: d.filter.residual,
            config: d.config.clone(),
            trace: d.trace.clone(),
        },
    )
}

/// Loads a defense and checks its tensors against `model`.
pub fn load_defense(dir: &Path, model: &ParModel) -> Result<Defense> {
    let meta: DefenseMeta = read_json(&dir.join(DEFENSE_FILE))?;
    let filter = FilterParams {
        kernel: dtsr::load_tensor(&dir.join("filter_kernel.dtsr"))?,
        bias: dtsr::load_tensor(&dir.join("filter_bias.dtsr"))?,
        residual: meta.residual,
    };
    let prompt = PromptParams {
        offsets: dtsr::load_tensor(&dir.join("prompt_offsets.dtsr"))?,
    };
    let c = model.config.channels;
    if filter.kernel.shape() != [c, c, FILTER_KERNEL, FILTER_KERNEL] || filter.bias.shape() != [c] {
        return Err(Error::Mismatch(format!(
            "filter shapes {:?}/{:?} do not fit {c} channels",
            filter.kernel.shape(),
            filter.bias.shape()
        )));
    }
    if prompt.offsets.shape() != model.prompt_shape() {
        return Err(Error::Mismatch(format!(
            "prompt offsets {:?}, model expects {:?}",
            prompt.offsets.shape(),
            model.prompt_shape()
        )));
    }
    Ok(Defense {
        filter,
        prompt,
        config: meta.config,
        noise_hash: meta.noise_hash,
        trace: meta.trace,
    })
}
