//! Independent double-precision forward implementations used as
//! finite-difference oracles.

use std::collections::HashMap;

use parattack::model::ModelConfig;
use parattack::{ParModel, Tensor};

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Arr {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Arr::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn scalar(v: f64) -> Self {
        Arr::new(&[], vec![v])
    }

    fn rc(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, o: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
        assert_eq!(self.shape, o.shape);
        Arr::new(
            &self.shape,
            self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }
}

pub fn matmul(a: &Arr, b: &Arr) -> Arr {
    let (m, k) = a.rc();
    let (k2, n) = b.rc();
    assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
        }
    }
    Arr::new(&[m, n], out)
}

pub fn transpose(a: &Arr) -> Arr {
    let (m, n) = a.rc();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at(i, j);
        }
    }
    Arr::new(&[n, m], out)
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    a.zip(b, |x, y| x + y)
}

pub fn sub(a: &Arr, b: &Arr) -> Arr {
    a.zip(b, |x, y| x - y)
}

pub fn mul(a: &Arr, b: &Arr) -> Arr {
    a.zip(b, |x, y| x * y)
}

pub fn scale(a: &Arr, c: f64) -> Arr {
    a.map(|v| v * c)
}

pub fn add_scalar(a: &Arr, c: f64) -> Arr {
    a.map(|v| v + c)
}

pub fn add_row(a: &Arr, row: &Arr) -> Arr {
    let (_, n) = a.rc();
    Arr::new(
        &a.shape,
        a.data.iter().enumerate().map(|(i, v)| v + row.data[i % n]).collect(),
    )
}

pub fn sigmoid(a: &Arr) -> Arr {
    a.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn relu(a: &Arr) -> Arr {
    a.map(|v| v.max(0.0))
}

pub fn clamp(a: &Arr, lo: f64, hi: f64) -> Arr {
    a.map(|v| v.clamp(lo, hi))
}

/// Softmax of a matrix along `axis`.
pub fn softmax(a: &Arr, axis: usize) -> Arr {
    let t = if axis == 0 { transpose(a) } else { a.clone() };
    let (m, n) = t.rc();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let mx = (0..n).map(|j| t.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|j| (t.at(i, j) - mx).exp()).sum();
        for j in 0..n {
            out[i * n + j] = (t.at(i, j) - mx).exp() / z;
        }
    }
    let r = Arr::new(&[m, n], out);
    if axis == 0 {
        transpose(&r)
    } else {
        r
    }
}

pub fn layer_norm(a: &Arr, gamma: &Arr, beta: &Arr) -> Arr {
    let (m, n) = a.rc();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row: Vec<f64> = (0..n).map(|j| a.at(i, j)).collect();
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..n {
            out[i * n + j] = (row[j] - mean) * inv * gamma.data[j] + beta.data[j];
        }
    }
    Arr::new(&[m, n], out)
}

pub fn embedding(table: &Arr, idx: &[usize]) -> Arr {
    let (_, d) = table.rc();
    let data = idx
        .iter()
        .flat_map(|&i| table.data[i * d..(i + 1) * d].to_vec())
        .collect();
    Arr::new(&[idx.len(), d], data)
}

/// Concatenation of matrices along `axis`.
pub fn concat(parts: &[&Arr], axis: usize) -> Arr {
    if axis == 1 {
        let t: Vec<Arr> = parts.iter().map(|p| transpose(p)).collect();
        let refs: Vec<&Arr> = t.iter().collect();
        return transpose(&concat(&refs, 0));
    }
    let n = parts[0].shape[1];
    let rows = parts.iter().map(|p| p.shape[0]).sum();
    Arr::new(&[rows, n], parts.iter().flat_map(|p| p.data.clone()).collect())
}

/// Columns or rows `start..start+len` of a matrix.
pub fn slice(a: &Arr, axis: usize, start: usize, len: usize) -> Arr {
    if axis == 1 {
        return transpose(&slice(&transpose(a), 0, start, len));
    }
    let n = a.shape[1];
    Arr::new(&[len, n], a.data[start * n..(start + len) * n].to_vec())
}

pub fn sum(a: &Arr) -> Arr {
    Arr::scalar(a.data.iter().sum())
}

pub fn mean(a: &Arr) -> Arr {
    Arr::scalar(a.data.iter().sum::<f64>() / a.data.len() as f64)
}

/// Sum of a matrix along `axis`.
pub fn sum_axis(a: &Arr, axis: usize) -> Arr {
    let t = if axis == 0 { transpose(a) } else { a.clone() };
    let (m, n) = t.rc();
    Arr::new(&[m], (0..m).map(|i| (0..n).map(|j| t.at(i, j)).sum()).collect())
}

pub fn conv2d_same(x: &Arr, k: &Arr, b: &Arr) -> Arr {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, ks) = (k.shape[0], k.shape[2]);
    let r = (ks / 2) as isize;
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h {
            for z in 0..w {
                let mut acc = b.data[o];
                for ci in 0..c {
                    for dy in 0..ks {
                        for dz in 0..ks {
                            let (sy, sz) = (y as isize + dy as isize - r, z as isize + dz as isize - r);
                            if sy < 0 || sz < 0 || sy >= h as isize || sz >= w as isize {
                                continue;
                            }
                            let kv = k.data[((o * c + ci) * ks + dy) * ks + dz];
                            acc += kv * x.data[(ci * h + sy as usize) * w + sz as usize];
                        }
                    }
                }
                out[(o * h + y) * w + z] = acc;
            }
        }
    }
    Arr::new(&[co, h, w], out)
}

/// Non-overlapping `p×p` patches in row-major patch order; features ordered
/// by channel, then patch row, then patch column.
pub fn patchify(x: &Arr, p: usize) -> Arr {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut rows = Vec::new();
    for py in 0..h / p {
        for px in 0..w / p {
            for ci in 0..c {
                for i in 0..p {
                    for j in 0..p {
                        rows.push(x.data[(ci * h + py * p + i) * w + px * p + j]);
                    }
                }
            }
        }
    }
    Arr::new(&[(h / p) * (w / p), c * p * p], rows)
}

pub fn place_patch(x: &Arr, height: usize, width: usize, row: usize, col: usize) -> Arr {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![0.0; c * height * width];
    for ci in 0..c {
        for y in 0..h {
            for z in 0..w {
                out[(ci * height + row + y) * width + col + z] = x.data[(ci * h + y) * w + z];
            }
        }
    }
    Arr::new(&[c, height, width], out)
}

pub fn normalize_rows(a: &Arr) -> Arr {
    let (m, n) = a.rc();
    let mut out = a.data.clone();
    for i in 0..m {
        let norm = (0..n).map(|j| a.at(i, j).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= norm);
        }
    }
    Arr::new(&[m, n], out)
}

/// Weighted cross-entropy summed over the last axis, averaged over rows.
pub fn bce(p: &Arr, y: &Arr, w: &Arr) -> Arr {
    let n = w.data.len();
    let rows = p.data.len() / n;
    let total: f64 = p
        .data
        .iter()
        .zip(&y.data)
        .enumerate()
        .map(|(i, (&p, &y))| w.data[i % n] * (y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    Arr::scalar(-total / rows as f64)
}

/// Double-precision copy of a model's weights keyed by checkpoint name.
pub struct RefModel {
    pub config: ModelConfig,
    pub weights: HashMap<String, Arr>,
}

impl RefModel {
    pub fn new(model: &ParModel) -> Self {
        RefModel {
            config: model.config.clone(),
            weights: model
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, Arr::from_tensor(t)))
                .collect(),
        }
    }

    fn w(&self, name: &str) -> &Arr {
        &self.weights[name]
    }

    /// `(probs, gl_scores)` for one image.
    pub fn forward(&self, image: &Arr) -> (Arr, Arr) {
        let cfg = &self.config;
        let (d, heads) = (cfg.embed_dim, cfg.attention_heads);
        let dh = d / heads;
        let patches = patchify(image, cfg.patch_size);
        let img = add(
            &add_row(
                &matmul(&patches, self.w("patch_embed.weight")),
                self.w("patch_embed.bias"),
            ),
            self.w("pos_embed"),
        );
        let idx: Vec<usize> = (0..cfg.attribute_count).collect();
        let text = embedding(self.w("attr_embed"), &idx);
        let t = img.shape[0];

        let mut x = concat(&[&img, &text], 0);
        for l in 0..cfg.fusion_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            let h = layer_norm(&x, self.w(&p("ln1.gamma")), self.w(&p("ln1.beta")));
            let qkv = add_row(&matmul(&h, self.w(&p("attn.qkv.weight"))), self.w(&p("attn.qkv.bias")));
            let mut outs = Vec::new();
            for hd in 0..heads {
                let q = slice(&qkv, 1, hd * dh, dh);
                let k = slice(&qkv, 1, d + hd * dh, dh);
                let v = slice(&qkv, 1, 2 * d + hd * dh, dh);
                let s = scale(&matmul(&q, &transpose(&k)), 1.0 / (dh as f64).sqrt());
                outs.push(matmul(&softmax(&s, 1), &v));
            }
            let refs: Vec<&Arr> = outs.iter().collect();
            let att = add_row(
                &matmul(&concat(&refs, 1), self.w(&p("attn.out.weight"))),
                self.w(&p("attn.out.bias")),
            );
            x = add(&x, &att);
            let h = layer_norm(&x, self.w(&p("ln2.gamma")), self.w(&p("ln2.beta")));
            let h = relu(&add_row(
                &matmul(&h, self.w(&p("mlp.fc1.weight"))),
                self.w(&p("mlp.fc1.bias")),
            ));
            let h = add_row(&matmul(&h, self.w(&p("mlp.fc2.weight"))), self.w(&p("mlp.fc2.bias")));
            x = add(&x, &h);
        }
        let fused_text = slice(&x, 0, t, cfg.attribute_count);
        let logits = add(
            &sum_axis(&mul(&fused_text, self.w("head.weight")), 1),
            self.w("head.bias"),
        );
        let probs = clamp(&sigmoid(&logits), 1e-6, 1.0 - 1e-6);

        let img_n = normalize_rows(&img);
        let text_n = normalize_rows(&text);
        let sims = scale(
            &matmul(&text_n, &transpose(&img_n)),
            1.0 / cfg.aggregator_temperature as f64,
        );
        let pooled = matmul(&softmax(&sims, 1), &img);
        let raw = sum_axis(&mul(&normalize_rows(&pooled), &text_n), 1);
        let gl = clamp(&add_scalar(&scale(&raw, 0.5), 0.5), 1e-6, 1.0 - 1e-6);
        (probs, gl)
    }
}
