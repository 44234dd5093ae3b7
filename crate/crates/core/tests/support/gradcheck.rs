//! Analytic gradients against central differences of a double-precision
//! reference.

use parattack::labels::AttributeSchema;
use parattack::model::{forward_nodes, ModelConfig};
use parattack::{Graph, NodeId, ParModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{self as r, Arr, RefModel};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

pub fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6)
}

pub type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;
pub type Reference = dyn Fn(&[Arr]) -> Arr;
pub type Inputs = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;

/// Worst relative error over every input element for the scalar
/// `Σ w ∘ op(inputs)` with random `w`.
pub fn max_rel_error(inputs: &[Tensor], build: &Build, reference: &Reference, seed: u64) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::from_fn(g.value(out).shape(), |_| rng.random_range(-1.0f32..1.0));
    let wn = g.constant(w.clone());
    let prod = g.mul(out, wn).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();

    let w64 = Arr::from_tensor(&w);
    let objective = |xs: &[Arr]| -> f64 { r::sum(&r::mul(&reference(xs), &w64)).data[0] };
    let base: Vec<Arr> = inputs.iter().map(Arr::from_tensor).collect();
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("gradient for every input");
        for e in 0..base[k].data.len() {
            let mut xs = base.clone();
            xs[k].data[e] += STEP;
            let up = objective(&xs);
            xs[k].data[e] -= 2.0 * STEP;
            let down = objective(&xs);
            let fd = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[e] as f64, fd));
        }
    }
    worst
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform entries at least `gap` away from every point in `kinks`.
pub fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32, kinks: &[f32], gap: f32) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() >= gap) {
            break v;
        }
    })
}

/// One named operation check: input generator, graph builder, reference.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Box<Inputs>,
    pub build: Box<Build>,
    pub reference: Box<Reference>,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId + 'static,
    reference: impl Fn(&[Arr]) -> Arr + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs: Box::new(inputs),
        build: Box::new(build),
        reference: Box::new(reference),
    }
}

/// Every differentiable graph operation.
pub fn op_cases() -> Vec<OpCase> {
    let u = |shape: &'static [usize]| move |rng: &mut ChaCha8Rng| vec![uniform(rng, shape, -1.0, 1.0)];
    vec![
        case(
            "matmul",
            |rng| vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)],
            |g, x| g.matmul(x[0], x[1]).unwrap(),
            |x| r::matmul(&x[0], &x[1]),
        ),
        case(
            "transpose",
            u(&[3, 4]),
            |g, x| g.transpose(x[0]).unwrap(),
            |x| r::transpose(&x[0]),
        ),
        case(
            "add",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
            |g, x| g.add(x[0], x[1]).unwrap(),
            |x| r::add(&x[0], &x[1]),
        ),
        case(
            "sub",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
            |g, x| g.sub(x[0], x[1]).unwrap(),
            |x| r::sub(&x[0], &x[1]),
        ),
        case(
            "mul",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
            |g, x| g.mul(x[0], x[1]).unwrap(),
            |x| r::mul(&x[0], &x[1]),
        ),
        case(
            "scale",
            u(&[2, 3]),
            |g, x| g.scale(x[0], 1.7),
            |x| r::scale(&x[0], 1.7f32 as f64),
        ),
        case(
            "add_scalar",
            u(&[2, 3]),
            |g, x| g.add_scalar(x[0], 0.3),
            |x| r::add_scalar(&x[0], 0.3f32 as f64),
        ),
        case(
            "add_row",
            |rng| vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)],
            |g, x| g.add_row(x[0], x[1]).unwrap(),
            |x| r::add_row(&x[0], &x[1]),
        ),
        case(
            "sigmoid",
            |rng| vec![uniform(rng, &[2, 3], -3.0, 3.0)],
            |g, x| g.sigmoid(x[0]),
            |x| r::sigmoid(&x[0]),
        ),
        case(
            "relu",
            |rng| vec![away_from(rng, &[2, 3], -1.0, 1.0, &[0.0], 0.01)],
            |g, x| g.relu(x[0]),
            |x| r::relu(&x[0]),
        ),
        case(
            "softmax_rows",
            |rng| vec![uniform(rng, &[3, 4], -2.0, 2.0)],
            |g, x| g.softmax(x[0], 1).unwrap(),
            |x| r::softmax(&x[0], 1),
        ),
        case(
            "softmax_cols",
            |rng| vec![uniform(rng, &[3, 4], -2.0, 2.0)],
            |g, x| g.softmax(x[0], 0).unwrap(),
            |x| r::softmax(&x[0], 0),
        ),
        case(
            "layer_norm",
            |rng| {
                vec![
                    uniform(rng, &[3, 5], -1.0, 1.0),
                    uniform(rng, &[5], 0.5, 1.5),
                    uniform(rng, &[5], -0.5, 0.5),
                ]
            },
            |g, x| g.layer_norm(x[0], x[1], x[2]).unwrap(),
            |x| r::layer_norm(&x[0], &x[1], &x[2]),
        ),
        case(
            "embedding",
            u(&[4, 3]),
            |g, x| g.embedding(x[0], &[2, 0, 2]).unwrap(),
            |x| r::embedding(&x[0], &[2, 0, 2]),
        ),
        case(
            "concat_rows",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[1, 3], -1.0, 1.0)],
            |g, x| g.concat(&[x[0], x[1]], 0).unwrap(),
            |x| r::concat(&[&x[0], &x[1]], 0),
        ),
        case(
            "concat_cols",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 2], -1.0, 1.0)],
            |g, x| g.concat(&[x[0], x[1]], 1).unwrap(),
            |x| r::concat(&[&x[0], &x[1]], 1),
        ),
        case(
            "slice",
            u(&[3, 5]),
            |g, x| g.slice(x[0], 1, 1, 3).unwrap(),
            |x| r::slice(&x[0], 1, 1, 3),
        ),
        case("sum", u(&[2, 3]), |g, x| g.sum(x[0]), |x| r::sum(&x[0])),
        case("mean", u(&[2, 3]), |g, x| g.mean(x[0]), |x| r::mean(&x[0])),
        case(
            "sum_axis",
            u(&[3, 4]),
            |g, x| g.sum_axis(x[0], 0).unwrap(),
            |x| r::sum_axis(&x[0], 0),
        ),
        case(
            "clamp",
            |rng| vec![away_from(rng, &[2, 4], -1.0, 1.0, &[-0.5, 0.5], 0.01)],
            |g, x| g.clamp(x[0], -0.5, 0.5),
            |x| r::clamp(&x[0], -0.5, 0.5),
        ),
        case(
            "conv2d_same",
            |rng| {
                vec![
                    uniform(rng, &[2, 5, 4], -1.0, 1.0),
                    uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(rng, &[3], -1.0, 1.0),
                ]
            },
            |g, x| g.conv2d_same(x[0], x[1], x[2]).unwrap(),
            |x| r::conv2d_same(&x[0], &x[1], &x[2]),
        ),
        case(
            "patchify",
            u(&[2, 4, 6]),
            |g, x| g.patchify(x[0], 2).unwrap(),
            |x| r::patchify(&x[0], 2),
        ),
        case(
            "place_patch",
            u(&[2, 2, 3]),
            |g, x| g.place_patch(x[0], 4, 5, 1, 1).unwrap(),
            |x| r::place_patch(&x[0], 4, 5, 1, 1),
        ),
        case(
            "normalize_rows",
            |rng| vec![uniform(rng, &[3, 4], 0.1, 1.0)],
            |g, x| g.normalize_rows(x[0]).unwrap(),
            |x| r::normalize_rows(&x[0]),
        ),
        case(
            "bce",
            |rng| vec![uniform(rng, &[2, 3], 0.05, 0.95)],
            |g, x| {
                let y = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
                let w = Tensor::vector(vec![0.5, 1.0, 0.8]);
                g.bce(x[0], &y, &w).unwrap()
            },
            |x| {
                let y = Arr::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
                let w = Arr::new(&[3], vec![0.5, 1.0, 0.8f32 as f64]);
                r::bce(&x[0], &y, &w)
            },
        ),
    ]
}

/// Single-patch model used for the end-to-end noise gradient check.
pub fn one_patch_model(seed: u64) -> ParModel {
    let cfg = ModelConfig {
        image_height: 8,
        image_width: 8,
        channels: 3,
        patch_size: 8,
        embed_dim: 8,
        fusion_layers: 1,
        attention_heads: 2,
        attribute_count: 3,
        aggregator_temperature: 0.5,
    };
    let schema = AttributeSchema::from_sizes(&[1, 2]).unwrap();
    ParModel::init(cfg, schema, seed).unwrap()
}

/// Worst relative error of `∂loss/∂η` for the attack objective
/// `bce(probs) + α·bce(gl)` on `clamp(x + η)`.
pub fn model_noise_error(seed: u64) -> f64 {
    let model = one_patch_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.config.image_shape();
    let image = uniform(&mut rng, &shape, 0.2, 0.8);
    let noise = uniform(&mut rng, &shape, -0.03, 0.03);
    let targets = Tensor::vector((0..3).map(|_| rng.random_range(0..2) as f32).collect());
    let weights = uniform(&mut rng, &[3], 0.3, 1.0);
    let alpha = 0.5f32;

    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let n = g.param(noise.clone());
    let noisy = g.add(x, n).unwrap();
    let noisy = g.clamp(noisy, 0.0, 1.0);
    let out = forward_nodes(&mut g, &model.config, &p, noisy, None).unwrap();
    let cse = g.bce(out.probs, &targets, &weights).unwrap();
    let gl = g.bce(out.gl_scores, &targets, &Tensor::ones(&[3])).unwrap();
    let gl = g.scale(gl, alpha);
    let loss = g.add(cse, gl).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(n).unwrap();

    let reference = RefModel::new(&model);
    let (x64, y64, w64) = (
        Arr::from_tensor(&image),
        Arr::from_tensor(&targets),
        Arr::from_tensor(&weights),
    );
    let ones = Arr::new(&[3], vec![1.0; 3]);
    let objective = |eta: &Arr| -> f64 {
        let (probs, gl) = reference.forward(&r::clamp(&r::add(&x64, eta), 0.0, 1.0));
        r::bce(&probs, &y64, &w64).data[0] + alpha as f64 * r::bce(&gl, &y64, &ones).data[0]
    };
    let base = Arr::from_tensor(&noise);
    let mut worst = 0.0f64;
    for e in 0..base.data.len() {
        let mut eta = base.clone();
        eta.data[e] += STEP;
        let up = objective(&eta);
        eta.data[e] -= 2.0 * STEP;
        let down = objective(&eta);
        worst = worst.max(rel_err(analytic.data()[e] as f64, (up - down) / (2.0 * STEP)));
    }
    worst
}

/// `(name, worst error over seeds)` for every op and the model objective.
pub fn run_all(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = op_cases()
        .iter()
        .map(|c| {
            let worst = seeds
                .clone()
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let inputs = (c.inputs)(&mut rng);
                    max_rel_error(&inputs, &*c.build, &*c.reference, s)
                })
                .fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect();
    out.push(("model_loss_wrt_noise", seeds.map(model_noise_error).fold(0.0, f64::max)));
    out
}
