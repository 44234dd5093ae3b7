//! Universal perturbation training and per-image gradient-attack baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::labels::perturb_labels;
use crate::losses::{compute_weights, ClassWeights, DEFAULT_ALPHA};
use crate::model::{forward_nodes, ParModel};
use crate::optim::{batch_mean, LrSchedule};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use crate::train::epoch_batches;

/// Default L∞ budget, 10/255.
pub const DEFAULT_EPSILON: f32 = 10.0 / 255.0;
/// Nominal side of the square patch; clipped to the image when larger.
pub const DEFAULT_PATCH_SIZE: usize = 30;

const STREAM_INIT: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

/// Where the noise tensor lives on the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    Global,
    Patch { row: usize, col: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Global,
    Patch,
}

/// A universal noise tensor with its placement and budget.
///
/// Global noise has the image shape; patch noise is a `C×h×w` block whose
/// window lies inside the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub placement: Placement,
    pub noise: Tensor,
    pub epsilon: f32,
    pub image_shape: [usize; 3],
}

/// Block size and top-left corner of a centered patch, each side clipped to
/// the image.
pub fn centered_patch(image_shape: [usize; 3], size: usize) -> ([usize; 3], usize, usize) {
    let [c, h, w] = image_shape;
    let (ph, pw) = (size.min(h), size.min(w));
    ([c, ph, pw], (h - ph) / 2, (w - pw) / 2)
}

impl Perturbation {
    pub fn zeros(placement: Placement, noise_shape: &[usize], epsilon: f32, image_shape: [usize; 3]) -> Result<Self> {
        let p = Perturbation {
            placement,
            noise: Tensor::zeros(noise_shape),
            epsilon,
            image_shape,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        let [c, h, w] = self.image_shape;
        let (nc, nh, nw) = self.noise.dims3()?;
        match self.placement {
            Placement::Global if (nc, nh, nw) != (c, h, w) => Err(Error::Mismatch(format!(
                "global noise {:?} does not match image {:?}",
                self.noise.shape(),
                self.image_shape
            ))),
            Placement::Patch { row, col } if nc != c || row + nh > h || col + nw > w => {
                Err(Error::InvalidArgument(format!(
                    "patch {:?} at ({row}, {col}) is out of bounds for image {:?}",
                    self.noise.shape(),
                    self.image_shape
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn mode(&self) -> NoiseMode {
        match self.placement {
            Placement::Global => NoiseMode::Global,
            Placement::Patch { .. } => NoiseMode::Patch,
        }
    }

    /// The noise on a zero canvas of the image size.
    pub fn canvas(&self) -> Result<Tensor> {
        match self.placement {
            Placement::Global => Ok(self.noise.clone()),
            Placement::Patch { row, col } => {
                crate::ops::place_patch(&self.noise, self.image_shape[1], self.image_shape[2], row, col)
            }
        }
    }

    /// `image + η` on the placed window, without range clamping.
    pub fn add_unclamped(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.image_shape {
            return Err(Error::shape("apply_noise", image.shape(), &self.image_shape));
        }
        let [_, h, w] = self.image_shape;
        let mut out = image.clone();
        let (nc, nh, nw) = self.noise.dims3()?;
        let (row, col) = match self.placement {
            Placement::Global => (0, 0),
            Placement::Patch { row, col } => (row, col),
        };
        let dst = out.data_mut();
        let src = self.noise.data();
        for c in 0..nc {
            for y in 0..nh {
                let d = (c * h + row + y) * w + col;
                let s = (c * nh + y) * nw;
                for x in 0..nw {
                    dst[d + x] += src[s + x];
                }
            }
        }
        Ok(out)
    }

    /// Clips every entry into `[−ε, ε]`.
    pub fn clip(&mut self) {
        let e = self.epsilon;
        self.noise.data_mut().iter_mut().for_each(|v| *v = v.clamp(-e, e));
    }
}

/// `clamp(image + η, 0, 1)`.
pub fn apply_noise(image: &Tensor, eta: &Perturbation) -> Result<Tensor> {
    eta.validate()?;
    Ok(crate::ops::clamp(&eta.add_unclamped(image)?, 0.0, 1.0))
}

pub fn clip_noise(mut eta: Perturbation) -> Perturbation {
    eta.clip();
    eta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_epochs: usize,
    pub warmup_ratio: f32,
    pub alpha: f32,
    pub epsilon: f32,
    pub mode: NoiseMode,
    pub patch_size: usize,
    /// Top-left corner of the patch; centered when absent.
    pub patch_origin: Option<(usize, usize)>,
    pub seed: u64,
    pub use_semantic: bool,
    pub use_label_perturbation: bool,
    pub use_linf_constraint: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epochs: 40,
            batch_size: 32,
            lr: 8e-3,
            warmup_epochs: 5,
            warmup_ratio: 0.01,
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            mode: NoiseMode::Global,
            patch_size: DEFAULT_PATCH_SIZE,
            patch_origin: None,
            seed: 0,
            use_semantic: true,
            use_label_perturbation: true,
            use_linf_constraint: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("attack batch_size must be positive".into()));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lr >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config("attack lr and alpha must be non-negative".into()));
        }
        if self.mode == NoiseMode::Patch && self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
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

    /// Zero noise with this config's placement for the given image shape.
    pub fn empty_noise(&self, image_shape: [usize; 3]) -> Result<Perturbation> {
        match self.mode {
            NoiseMode::Global => Perturbation::zeros(Placement::Global, &image_shape, self.epsilon, image_shape),
            NoiseMode::Patch => {
                let (shape, row, col) = centered_patch(image_shape, self.patch_size);
                let (row, col) = self.patch_origin.unwrap_or((row, col));
                Perturbation::zeros(Placement::Patch { row, col }, &shape, self.epsilon, image_shape)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEpoch {
    pub epoch: usize,
    pub lr: f32,
    /// Mean attack objective over the epoch's batches.
    pub loss: f64,
    /// `max|η|` after the epoch's last update.
    pub max_abs: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProvenance {
    pub config: AttackConfig,
    pub trace: Vec<AttackEpoch>,
    pub max_abs: f32,
    pub seed: u64,
}

/// Targets and sign of the attack objective for one dataset.
struct Objective {
    targets: Vec<Tensor>,
    weights: ClassWeights,
    ones: ClassWeights,
    alpha: f32,
    semantic: bool,
    /// `+1` descends towards the targets, `−1` ascends away from them.
    direction: f32,
}

impl Objective {
    fn new(data: &Dataset, cfg: &AttackConfig) -> Result<Self> {
        let weights = compute_weights(&data.labels())?;
        let targets = data
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if cfg.use_label_perturbation {
                    let seed = derive_seed(cfg.seed, &[STREAM_LABELS, i as u64]);
                    let p = perturb_labels(&s.labels, &data.schema, seed)?;
                    Ok(Tensor::vector(p.labels.to_f32()))
                } else {
                    Ok(Tensor::vector(s.labels.to_f32()))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Objective {
            targets,
            ones: ClassWeights::uniform(data.schema.len()),
            weights,
            alpha: cfg.alpha,
            semantic: cfg.use_semantic,
            direction: if cfg.use_label_perturbation { 1.0 } else { -1.0 },
        })
    }

    /// Records the loss for sample `i` on `g` given its forward nodes.
    fn loss(&self, g: &mut Graph, probs: NodeId, gl: NodeId, i: usize) -> Result<NodeId> {
        let cse = g.bce(probs, &self.targets[i], &self.weights.weights)?;
        if !self.semantic {
            return Ok(cse);
        }
        let gl = g.bce(gl, &self.targets[i], &self.ones.weights)?;
        let gl = g.scale(gl, self.alpha);
        g.add(cse, gl)
    }
}

/// Loss and `∂loss/∂η` for one image.
fn noise_gradient(
    model: &ParModel,
    eta: &Perturbation,
    image: &Tensor,
    obj: &Objective,
    i: usize,
) -> Result<(f32, Tensor)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let n = g.param(eta.noise.clone());
    let canvas = match eta.placement {
        Placement::Global => n,
        Placement::Patch { row, col } => g.place_patch(n, eta.image_shape[1], eta.image_shape[2], row, col)?,
    };
    let noisy = g.add(x, canvas)?;
    let noisy = g.clamp(noisy, 0.0, 1.0);
    let out = forward_nodes(&mut g, &model.config, &p, noisy, None)?;
    let loss = obj.loss(&mut g, out.probs, out.gl_scores, i)?;
    let mut grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads.take(n).expect("noise gradient")))
}

/// Mean attack objective of `eta` over `data`, using the same targets as
/// [`train_universal`] with `cfg`.
pub fn attack_objective(model: &ParModel, data: &Dataset, eta: &Perturbation, cfg: &AttackConfig) -> Result<f64> {
    let obj = Objective::new(data, cfg)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (loss, _) = batch_mean(&idx, |i| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let x = g.constant(apply_noise(&data.samples[i].image, eta)?);
        let out = forward_nodes(&mut g, &model.config, &p, x, None)?;
        let loss = obj.loss(&mut g, out.probs, out.gl_scores, i)?;
        Ok((g.value(loss).item(), Vec::new()))
    })?;
    Ok(loss)
}

/// Trains one universal noise tensor against a frozen model.
///
/// With label perturbation the noise descends the loss towards per-sample
/// perturbed labels drawn once at the start; without it the noise ascends the
/// loss against the true labels. The model is never written.
pub fn train_universal(
    model: &ParModel,
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<(Perturbation, NoiseProvenance)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("attack dataset is empty".into()));
    }
    if data.schema.len() != model.config.attribute_count {
        return Err(Error::Mismatch(format!(
            "dataset has {} attributes, model {}",
            data.schema.len(),
            model.config.attribute_count
        )));
    }
    let mut eta = cfg.empty_noise(model.config.image_shape())?;
    let a = cfg.epsilon / 10.0;
    let mut rng = rng_from(derive_seed(cfg.seed, &[STREAM_INIT]));
    eta.noise
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-a..=a));

    let obj = Objective::new(data, cfg)?;
    let schedule = cfg.schedule();
    let shuffle_seed = derive_seed(cfg.seed, &[STREAM_SHUFFLE]);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut total = 0.0f64;
        for (b, batch) in epoch_batches(data.len(), cfg.batch_size, shuffle_seed, epoch)
            .iter()
            .enumerate()
        {
            let (loss, grads) = batch_mean(batch, |i| {
                let (l, grad) = noise_gradient(model, &eta, &data.samples[i].image, &obj, i)?;
                Ok((l, vec![grad]))
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: loss as f32,
                });
            }
            total += loss * batch.len() as f64;
            let step = lr * obj.direction;
            for (v, g) in eta.noise.data_mut().iter_mut().zip(grads[0].data()) {
                *v -= step * g;
            }
            if cfg.use_linf_constraint {
                eta.clip();
            }
        }
        let record = AttackEpoch {
            epoch,
            lr,
            loss: total / data.len() as f64,
            max_abs: eta.noise.max_abs(),
        };
        log::info!(
            "attack epoch {epoch}: lr {lr:.6} loss {:.6} max|η| {:.6}",
            record.loss,
            record.max_abs
        );
        trace.push(record);
    }
    let provenance = NoiseProvenance {
        config: cfg.clone(),
        trace,
        max_abs: eta.noise.max_abs(),
        seed: cfg.seed,
    };
    Ok((eta, provenance))
}

/// Per-image attack budget and step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineConfig {
    pub epsilon: f32,
    pub step: f32,
    pub steps: usize,
}

fn sign(v: f64) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the weighted cross-entropy against `y` at `x`.
fn input_gradient(model: &ParModel, x: &Tensor, y: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let xn = g.param(x.clone());
    let out = forward_nodes(&mut g, &model.config, &p, xn, None)?;
    let loss = g.bce(out.probs, y, weights)?;
    let mut grads = g.backward(loss)?;
    Ok(grads.take(xn).expect("input gradient"))
}

/// Projects `candidate` into the ε-ball around `x0` and the unit range, so that
/// `|result − x0| ≤ ε` holds exactly in f32 arithmetic.
fn project(x0: &Tensor, candidate: &mut Tensor, eps: f32) {
    for (v, &o) in candidate.data_mut().iter_mut().zip(x0.data()) {
        let mut p = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        while p - o > eps {
            p = p.next_down();
        }
        while o - p > eps {
            p = p.next_up();
        }
        *v = p;
    }
}

fn check_baseline(cfg: &BaselineConfig) -> Result<()> {
    if !(cfg.epsilon > 0.0) || !(cfg.step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "baseline epsilon and step must be positive, got {} and {}",
            cfg.epsilon, cfg.step
        )));
    }
    Ok(())
}

/// Momentum-accumulated sign ascent from `start`; `mu = None` uses the raw
/// gradient sign.
fn iterate(
    model: &ParModel,
    x0: &Tensor,
    start: Tensor,
    y: &Tensor,
    weights: &Tensor,
    cfg: &BaselineConfig,
    mu: Option<f64>,
) -> Result<Tensor> {
    check_baseline(cfg)?;
    let mut x = start;
    let mut velocity = vec![0.0f64; x.numel()];
    for _ in 0..cfg.steps {
        let grad = input_gradient(model, &x, y, weights)?;
        match mu {
            None => {
                for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
                    *v += cfg.step * sign(g as f64);
                }
            }
            Some(mu) => {
                let l1: f64 = grad.data().iter().map(|g| (*g as f64).abs()).sum();
                let l1 = if l1 > 0.0 { l1 } else { 1.0 };
                for ((v, m), &g) in x.data_mut().iter_mut().zip(&mut velocity).zip(grad.data()) {
                    *m = mu * *m + g as f64 / l1;
                    *v += cfg.step * sign(*m);
                }
            }
        }
        project(x0, &mut x, cfg.epsilon);
    }
    Ok(x)
}

/// Single signed step of size ε.
pub fn fgsm(model: &ParModel, x: &Tensor, y: &Tensor, weights: &Tensor, epsilon: f32) -> Result<Tensor> {
    let cfg = BaselineConfig {
        epsilon,
        step: epsilon,
        steps: 1,
    };
    iterate(model, x, x.clone(), y, weights, &cfg, None)
}

pub fn ifgsm(model: &ParModel, x: &Tensor, y: &Tensor, weights: &Tensor, cfg: &BaselineConfig) -> Result<Tensor> {
    iterate(model, x, x.clone(), y, weights, cfg, None)
}

/// Iterative sign attack on an L1-normalized gradient accumulated with
/// momentum `mu`.
pub fn mifgsm(
    model: &ParModel,
    x: &Tensor,
    y: &Tensor,
    weights: &Tensor,
    cfg: &BaselineConfig,
    mu: f32,
) -> Result<Tensor> {
    iterate(model, x, x.clone(), y, weights, cfg, Some(mu as f64))
}

/// Iterative sign attack from an optional uniform random start in the ε-ball.
pub fn pgd(
    model: &ParModel,
    x: &Tensor,
    y: &Tensor,
    weights: &Tensor,
    cfg: &BaselineConfig,
    random_start: Option<u64>,
) -> Result<Tensor> {
    let mut start = x.clone();
    if let Some(seed) = random_start {
        let mut rng = rng_from(seed);
        let e = cfg.epsilon;
        start.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-e..=e));
        project(x, &mut start, e);
    }
    iterate(model, x, start, y, weights, cfg, None)
}
