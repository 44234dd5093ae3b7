//! Desk-scale vision–text fusion model for multi-label attribute recognition.
//!
//! Image patches are linearly embedded, attribute tokens come from a learned
//! table, both streams pass through a stack of pre-norm transformer layers
//! with full self-attention, and each fused attribute token feeds its own
//! affine head. A global-local aggregator scores image-text agreement per
//! attribute from the pre-fusion features.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::labels::AttributeSchema;
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Probabilities and similarity scores are clamped to `[PROB_EPS, 1 − PROB_EPS]`.
pub const PROB_EPS: f32 = 1e-6;

/// Hidden width of the transformer MLP relative to the embedding width.
pub const MLP_RATIO: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub fusion_layers: usize,
    pub attention_heads: usize,
    pub attribute_count: usize,
    pub aggregator_temperature: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 48,
            image_width: 24,
            channels: 3,
            patch_size: 8,
            embed_dim: 32,
            fusion_layers: 2,
            attention_heads: 4,
            attribute_count: 12,
            aggregator_temperature: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.patch_size == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "patch size {} must divide the {}×{} image",
                self.patch_size, self.image_height, self.image_width
            ));
        }
        if self.embed_dim == 0 || self.attention_heads == 0 || !self.embed_dim.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "embedding width {} must be a positive multiple of {} heads",
                self.embed_dim, self.attention_heads
            ));
        }
        if self.attribute_count == 0 {
            return bad("attribute count must be positive".into());
        }
        if !(self.aggregator_temperature > 0.0 && self.aggregator_temperature.is_finite()) {
            return bad(format!(
                "aggregator temperature must be positive, got {}",
                self.aggregator_temperature
            ));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.attention_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * MLP_RATIO
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_height, self.image_width]
    }
}

/// Weights of one pre-norm transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub qkv_weight: T,
    pub qkv_bias: T,
    pub out_weight: T,
    pub out_bias: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub mlp_weight1: T,
    pub mlp_bias1: T,
    pub mlp_weight2: T,
    pub mlp_bias2: T,
}

/// All model weights, generic over storage so the same layout serves both
/// owned tensors and graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub pos_embed: T,
    pub attr_embed: T,
    pub layers: Vec<LayerWeights<T>>,
    pub head_weight: T,
    pub head_bias: T,
}

pub type ModelParams = ModelWeights<Tensor>;
pub type BoundParams = ModelWeights<NodeId>;

impl<T> LayerWeights<T> {
    fn fields(&self) -> [(&'static str, &T); 12] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.out.weight", &self.out_weight),
            ("attn.out.bias", &self.out_bias),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.fc1.weight", &self.mlp_weight1),
            ("mlp.fc1.bias", &self.mlp_bias1),
            ("mlp.fc2.weight", &self.mlp_weight2),
            ("mlp.fc2.bias", &self.mlp_bias2),
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.out_weight,
            &mut self.out_bias,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.mlp_weight1,
            &mut self.mlp_bias1,
            &mut self.mlp_weight2,
            &mut self.mlp_bias2,
        ]
    }

    fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<LayerWeights<U>> {
        let mut g = |name: &str, v: &T| f(&format!("{prefix}.{name}"), v);
        Ok(LayerWeights {
            ln1_gamma: g("ln1.gamma", &self.ln1_gamma)?,
            ln1_beta: g("ln1.beta", &self.ln1_beta)?,
            qkv_weight: g("attn.qkv.weight", &self.qkv_weight)?,
            qkv_bias: g("attn.qkv.bias", &self.qkv_bias)?,
            out_weight: g("attn.out.weight", &self.out_weight)?,
            out_bias: g("attn.out.bias", &self.out_bias)?,
            ln2_gamma: g("ln2.gamma", &self.ln2_gamma)?,
            ln2_beta: g("ln2.beta", &self.ln2_beta)?,
            mlp_weight1: g("mlp.fc1.weight", &self.mlp_weight1)?,
            mlp_bias1: g("mlp.fc1.bias", &self.mlp_bias1)?,
            mlp_weight2: g("mlp.fc2.weight", &self.mlp_weight2)?,
            mlp_bias2: g("mlp.fc2.bias", &self.mlp_bias2)?,
        })
    }
}

impl<T> ModelWeights<T> {
    /// Every weight with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_weight),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("pos_embed".to_string(), &self.pos_embed),
            ("attr_embed".to_string(), &self.attr_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.fields().into_iter().map(|(n, v)| (format!("layers.{i}.{n}"), v)));
        }
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Mutable access in the same order as [`ModelWeights::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.pos_embed,
            &mut self.attr_embed,
        ];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<ModelWeights<U>> {
        Ok(ModelWeights {
            patch_weight: f("patch_embed.weight", &self.patch_weight)?,
            patch_bias: f("patch_embed.bias", &self.patch_bias)?,
            pos_embed: f("pos_embed", &self.pos_embed)?,
            attr_embed: f("attr_embed", &self.attr_embed)?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("layers.{i}"), &mut f))
                .collect::<Result<_>>()?,
            head_weight: f("head.weight", &self.head_weight)?,
            head_bias: f("head.bias", &self.head_bias)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelWeights<U> {
        self.try_map(|n, v| Ok(f(n, v))).expect("infallible map")
    }
}

impl ModelParams {
    /// Expected shapes for every parameter, keyed like [`ModelWeights::named`].
    pub fn shapes(cfg: &ModelConfig) -> ModelWeights<Vec<usize>> {
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden();
        let layer = LayerWeights {
            ln1_gamma: vec![d],
            ln1_beta: vec![d],
            qkv_weight: vec![d, 3 * d],
            qkv_bias: vec![3 * d],
            out_weight: vec![d, d],
            out_bias: vec![d],
            ln2_gamma: vec![d],
            ln2_beta: vec![d],
            mlp_weight1: vec![d, h],
            mlp_bias1: vec![h],
            mlp_weight2: vec![h, d],
            mlp_bias2: vec![d],
        };
        ModelWeights {
            patch_weight: vec![cfg.patch_dim(), d],
            patch_bias: vec![d],
            pos_embed: vec![cfg.tokens(), d],
            attr_embed: vec![cfg.attribute_count, d],
            layers: vec![layer; cfg.fusion_layers],
            head_weight: vec![cfg.attribute_count, d],
            head_bias: vec![cfg.attribute_count],
        }
    }

    /// Seeded random initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let shapes = Self::shapes(cfg);
        Ok(shapes.map(|name, shape| {
            let std = init_std(name, shape);
            match std {
                InitKind::Zeros => Tensor::zeros(shape),
                InitKind::Ones => Tensor::ones(shape),
                InitKind::Normal(s) => {
                    let dist = Normal::new(0.0f32, s).expect("valid std");
                    Tensor::from_fn(shape, |_| dist.sample(&mut rng))
                }
            }
        }))
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::shapes(cfg);
        if expected.layers.len() != self.layers.len() {
            return Err(Error::Mismatch(format!(
                "{} fusion layers in parameters, {} in config",
                self.layers.len(),
                expected.layers.len()
            )));
        }
        for ((name, t), (_, shape)) in self.named().into_iter().zip(expected.named()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Mismatch(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Mismatch(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    /// Adds each tensor of the graph as a parameter (`trainable`) or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        self.map(|_, t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

enum InitKind {
    Zeros,
    Ones,
    Normal(f32),
}

fn init_std(name: &str, shape: &[usize]) -> InitKind {
    if name.ends_with("gamma") {
        InitKind::Ones
    } else if name.ends_with("bias") || name.ends_with("beta") {
        InitKind::Zeros
    } else if name == "pos_embed" {
        InitKind::Normal(0.1)
    } else if name == "attr_embed" {
        InitKind::Normal(1.0)
    } else {
        // fan-in scaling; head weights are [N, d] with fan-in d
        let fan_in = if name == "head.weight" { shape[1] } else { shape[0] };
        InitKind::Normal(1.0 / (fan_in as f32).sqrt())
    }
}

/// Node handles of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub probs: NodeId,
    pub gl_scores: NodeId,
    pub img_tokens: NodeId,
    pub text_tokens: NodeId,
    pub fused_img: NodeId,
    pub fused_text: NodeId,
    /// One `L×L` attention matrix per layer and head.
    pub attention: Vec<NodeId>,
}

/// Values of a forward pass for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub probs: Tensor,
    pub gl_scores: Tensor,
    pub img_tokens: Tensor,
    pub text_tokens: Tensor,
    pub fused_img: Tensor,
    pub fused_text: Tensor,
}

impl ForwardNodes {
    pub fn values(&self, g: &Graph) -> ForwardOutput {
        ForwardOutput {
            probs: g.value(self.probs).clone(),
            gl_scores: g.value(self.gl_scores).clone(),
            img_tokens: g.value(self.img_tokens).clone(),
            text_tokens: g.value(self.text_tokens).clone(),
            fused_img: g.value(self.fused_img).clone(),
            fused_text: g.value(self.fused_text).clone(),
        }
    }
}

/// Image `C×H×W` to `T×d` visual tokens.
pub fn patch_embed(g: &mut Graph, cfg: &ModelConfig, p: &BoundParams, image: NodeId) -> Result<NodeId> {
    let shape = cfg.image_shape();
    if g.value(image).shape() != shape {
        return Err(Error::shape("patch_embed", g.value(image).shape(), &shape));
    }
    let patches = g.patchify(image, cfg.patch_size)?;
    let proj = g.matmul(patches, p.patch_weight)?;
    let proj = g.add_row(proj, p.patch_bias)?;
    g.add(proj, p.pos_embed)
}

/// `N×d` attribute tokens, optionally offset by prompt vectors.
pub fn text_embed(g: &mut Graph, cfg: &ModelConfig, p: &BoundParams, prompt: Option<NodeId>) -> Result<NodeId> {
    let indices: Vec<usize> = (0..cfg.attribute_count).collect();
    let text = g.embedding(p.attr_embed, &indices)?;
    match prompt {
        Some(offsets) => g.add(text, offsets),
        None => Ok(text),
    }
}

/// Output of the fusion transformer.
pub struct Fused {
    pub img: NodeId,
    pub text: NodeId,
    pub attention: Vec<NodeId>,
}

/// Joint self-attention over the concatenated `(T+N)×d` token sequence,
/// split back into image and text parts.
pub fn fuse(g: &mut Graph, cfg: &ModelConfig, p: &BoundParams, img: NodeId, text: NodeId) -> Result<Fused> {
    let t = g.value(img).shape()[0];
    let n = g.value(text).shape()[0];
    let mut x = g.concat(&[img, text], 0)?;
    let mut attention = Vec::new();
    for layer in &p.layers {
        x = transformer_layer(g, cfg, layer, x, &mut attention)?;
    }
    if p.layers.is_empty() {
        return Ok(Fused { img, text, attention });
    }
    Ok(Fused {
        img: g.slice(x, 0, 0, t)?,
        text: g.slice(x, 0, t, n)?,
        attention,
    })
}

fn transformer_layer(
    g: &mut Graph,
    cfg: &ModelConfig,
    w: &LayerWeights<NodeId>,
    x: NodeId,
    attention: &mut Vec<NodeId>,
) -> Result<NodeId> {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();

    let h = g.layer_norm(x, w.ln1_gamma, w.ln1_beta)?;
    let qkv = g.matmul(h, w.qkv_weight)?;
    let qkv = g.add_row(qkv, w.qkv_bias)?;
    let mut heads = Vec::with_capacity(cfg.attention_heads);
    for head in 0..cfg.attention_heads {
        let q = g.slice(qkv, 1, head * dh, dh)?;
        let k = g.slice(qkv, 1, d + head * dh, dh)?;
        let v = g.slice(qkv, 1, 2 * d + head * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores, 1)?;
        attention.push(weights);
        heads.push(g.matmul(weights, v)?);
    }
    let att = g.concat(&heads, 1)?;
    let att = g.matmul(att, w.out_weight)?;
    let att = g.add_row(att, w.out_bias)?;
    let x = g.add(x, att)?;

    let h = g.layer_norm(x, w.ln2_gamma, w.ln2_beta)?;
    let h = g.matmul(h, w.mlp_weight1)?;
    let h = g.add_row(h, w.mlp_bias1)?;
    let h = g.relu(h);
    let h = g.matmul(h, w.mlp_weight2)?;
    let h = g.add_row(h, w.mlp_bias2)?;
    g.add(x, h)
}

/// Per-attribute affine heads on the fused text tokens, then a clamped sigmoid.
pub fn predict(g: &mut Graph, p: &BoundParams, fused_text: NodeId) -> Result<NodeId> {
    let prod = g.mul(fused_text, p.head_weight)?;
    let logits = g.sum_axis(prod, 1)?;
    let logits = g.add(logits, p.head_bias)?;
    let probs = g.sigmoid(logits);
    Ok(g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS))
}

/// Global-local similarity score per attribute.
///
/// Each attribute attends over the visual tokens with weights
/// `softmax(cos(token_k, text_j) / τ)`; the cosine between the pooled visual
/// vector and the attribute vector is mapped affinely from `[−1, 1]` into
/// `(0, 1)` and clamped.
pub fn aggregate_gl(g: &mut Graph, img: NodeId, text: NodeId, temperature: f32) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "aggregator temperature must be positive, got {temperature}"
        )));
    }
    let img_n = g.normalize_rows(img)?;
    let text_n = g.normalize_rows(text)?;
    let img_t = g.transpose(img_n)?;
    let sims = g.matmul(text_n, img_t)?;
    let sims = g.scale(sims, 1.0 / temperature);
    let weights = g.softmax(sims, 1)?;
    let pooled = g.matmul(weights, img)?;
    let pooled_n = g.normalize_rows(pooled)?;
    let prod = g.mul(pooled_n, text_n)?;
    let raw = g.sum_axis(prod, 1)?;
    let half = g.scale(raw, 0.5);
    let score = g.add_scalar(half, 0.5);
    Ok(g.clamp(score, PROB_EPS, 1.0 - PROB_EPS))
}

/// Full forward pass recorded on `g`.
pub fn forward_nodes(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    image: NodeId,
    prompt: Option<NodeId>,
) -> Result<ForwardNodes> {
    let img_tokens = patch_embed(g, cfg, p, image)?;
    let text_tokens = text_embed(g, cfg, p, prompt)?;
    let fused = fuse(g, cfg, p, img_tokens, text_tokens)?;
    let probs = predict(g, p, fused.text)?;
    let gl_scores = aggregate_gl(g, img_tokens, text_tokens, cfg.aggregator_temperature)?;
    Ok(ForwardNodes {
        probs,
        gl_scores,
        img_tokens,
        text_tokens,
        fused_img: fused.img,
        fused_text: fused.text,
        attention: fused.attention,
    })
}

/// A configured model with its schema and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParModel {
    pub config: ModelConfig,
    pub schema: AttributeSchema,
    pub params: ModelParams,
}

impl ParModel {
    pub fn new(config: ModelConfig, schema: AttributeSchema, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if schema.len() != config.attribute_count {
            return Err(Error::Mismatch(format!(
                "schema has {} attributes, model config {}",
                schema.len(),
                config.attribute_count
            )));
        }
        params.validate(&config)?;
        Ok(ParModel { config, schema, params })
    }

    pub fn init(config: ModelConfig, schema: AttributeSchema, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::new(config, schema, params)
    }

    /// Forward pass without gradient bookkeeping.
    pub fn forward(&self, image: &Tensor, prompt: Option<&Tensor>) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let prompt = prompt.map(|t| g.constant(t.clone()));
        let nodes = forward_nodes(&mut g, &self.config, &p, x, prompt)?;
        Ok(nodes.values(&g))
    }

    /// Stacked `M×N` probabilities and similarity scores for many images.
    pub fn predict_batch(&self, images: &[&Tensor], prompt: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        use rayon::prelude::*;
        let outs: Vec<ForwardOutput> = images
            .par_iter()
            .map(|img| self.forward(img, prompt))
            .collect::<Result<_>>()?;
        let n = self.config.attribute_count;
        let mut probs = Vec::with_capacity(outs.len() * n);
        let mut gl = Vec::with_capacity(outs.len() * n);
        for o in &outs {
            probs.extend_from_slice(o.probs.data());
            gl.extend_from_slice(o.gl_scores.data());
        }
        Ok((
            Tensor::matrix(outs.len(), n, probs)?,
            Tensor::matrix(outs.len(), n, gl)?,
        ))
    }

    /// Shape of prompt offsets accepted by [`ParModel::forward`].
    pub fn prompt_shape(&self) -> [usize; 2] {
        [self.config.attribute_count, self.config.embed_dim]
    }
}
