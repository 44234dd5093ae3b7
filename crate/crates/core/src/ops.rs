//! Forward kernels on [`Tensor`] values.
//!
//! These are the eager forms of every differentiable operation; the
//! [`Graph`](crate::graph::Graph) records them and supplies the matching
//! backward rules.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, dot, Tensor};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_raw(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let d = x.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
        .map_err(|_| Error::shape("add", a.shape(), b.shape()))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x - y)
        .map_err(|_| Error::shape("sub", a.shape(), b.shape()))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
        .map_err(|_| Error::shape("mul", a.shape(), b.shape()))
}

/// Adds a length-`n` row vector to every row of an `m×n` matrix.
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if row.shape() != [n] {
        return Err(Error::shape("add_row", x.shape(), row.shape()));
    }
    let mut out = x.clone();
    let r = row.data();
    for i in 0..m {
        for (o, &b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(r) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn clamp(x: &Tensor, lo: f32, hi: f32) -> Tensor {
    x.map(|v| v.clamp(lo, hi))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |k: usize| base + k * inner;
            let mut max = f32::NEG_INFINITY;
            for k in 0..len {
                max = max.max(src[idx(k)]);
            }
            let mut total = 0.0f32;
            for k in 0..len {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Normalized values and per-row inverse standard deviations.
pub(crate) struct LayerNormStats {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub(crate) fn layer_norm_stats(x: &Tensor) -> LayerNormStats {
    let n = *x.shape().last().unwrap_or(&1);
    let rows = x.numel() / n;
    let d = x.data();
    let mut xhat = vec![0.0f32; d.len()];
    let mut inv_std = vec![0.0f32; rows];
    for r in 0..rows {
        let row = &d[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    LayerNormStats { xhat, inv_std }
}

/// Layer normalization over the last axis with gain and bias vectors.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().unwrap_or(&1);
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let stats = layer_norm_stats(x);
    Ok(layer_norm_apply(x, &stats.xhat, gamma, beta))
}

pub(crate) fn layer_norm_apply(x: &Tensor, xhat: &[f32], gamma: &Tensor, beta: &Tensor) -> Tensor {
    let n = gamma.numel();
    let g = gamma.data();
    let b = beta.data();
    Tensor::from_fn(x.shape(), |i| xhat[i] * g[i % n] + b[i % n])
}

/// Row lookup into an `rows×d` table.
pub fn embedding(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (rows, d) = table.dims2()?;
    if indices.is_empty() {
        return Err(Error::InvalidArgument("embedding with no indices".into()));
    }
    let mut out = Vec::with_capacity(indices.len() * d);
    for &ix in indices {
        if ix >= rows {
            return Err(Error::InvalidArgument(format!(
                "embedding index {ix} out of range for {rows} rows"
            )));
        }
        out.extend_from_slice(table.row(ix));
    }
    Tensor::new(&[indices.len(), d], out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let rank = first.rank();
    for p in parts {
        let same_rank = p.rank() == rank;
        let same_other = same_rank && (0..rank).all(|a| a == axis || p.shape()[a] == first.shape()[a]);
        if !same_other {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis)?;
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, alen, inner) = axis_split(x.shape(), axis)?;
    if len == 0 || start + len > alen {
        return Err(Error::InvalidArgument(format!(
            "slice {start}..{} out of range for axis {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * alen + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out)
}

/// Same-size 2-D convolution with zero padding `(k−1)/2`.
///
/// `x` is `C×H×W`, `kernel` is `C'×C×k×k` with odd `k`, `bias` has length `C'`.
pub fn conv2d_same(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (co, k) = conv_dims(x, kernel, bias)?;
    let r = (k / 2) as isize;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0f32; co * h * w];
    for o in 0..co {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.fill(bias.data()[o]);
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    let kv = kd[((o * c + ci) * k + dy) * k + dx];
                    let oy = dy as isize - r;
                    let ox = dx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &xd[(ci * h + sy as usize) * w..(ci * h + sy as usize + 1) * w];
                        let dst_row = &mut plane[y * w..(y + 1) * w];
                        let (x0, x1) = valid_range(w, ox);
                        for xx in x0..x1 {
                            dst_row[xx] += kv * src_row[(xx as isize + ox) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[co, h, w], out)
}

/// Output columns `x` for which `x + offset` lies inside `0..w`.
pub(crate) fn valid_range(w: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (w as isize - offset).min(w as isize).max(0) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn conv_dims(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (c, _, _) = x.dims3()?;
    let (co, kc, kh, kw) = match kernel.shape()[..] {
        [a, b, c2, d] => (a, b, c2, d),
        _ => return Err(Error::shape("conv2d_same", x.shape(), kernel.shape())),
    };
    if kc != c || kh != kw {
        return Err(Error::shape("conv2d_same", x.shape(), kernel.shape()));
    }
    if kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d_same needs an odd kernel size, got {kh}"
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::shape("conv2d_same", kernel.shape(), bias.shape()));
    }
    Ok((co, kh))
}

/// Splits a `C×H×W` image into non-overlapping `P×P` patches.
///
/// Output row `t` is patch `(t / (W/P), t % (W/P))`, flattened channel-major
/// as `(c, i, j)`.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch} does not tile {h}×{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let feat = c * patch * patch;
    let mut out = vec![0.0f32; gh * gw * feat];
    patch_index_map(c, h, w, patch, |t, f, src| out[t * feat + f] = x.data()[src]);
    Tensor::new(&[gh * gw, feat], out)
}

/// Calls `f(token, feature, source_index)` for every patchified element.
pub(crate) fn patch_index_map(c: usize, h: usize, w: usize, patch: usize, mut f: impl FnMut(usize, usize, usize)) {
    let gw = w / patch;
    for py in 0..h / patch {
        for px in 0..gw {
            let t = py * gw + px;
            for ci in 0..c {
                for i in 0..patch {
                    for j in 0..patch {
                        let feat = (ci * patch + i) * patch + j;
                        let src = (ci * h + py * patch + i) * w + px * patch + j;
                        f(t, feat, src);
                    }
                }
            }
        }
    }
}

/// Places a `C×h×w` block at `(row, col)` on a zero `C×height×width` canvas.
pub fn place_patch(x: &Tensor, height: usize, width: usize, row: usize, col: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if row + h > height || col + w > width {
        return Err(Error::InvalidArgument(format!(
            "{h}×{w} block at ({row}, {col}) does not fit in {height}×{width}"
        )));
    }
    let mut out = vec![0.0f32; c * height * width];
    for ci in 0..c {
        for y in 0..h {
            let dst = (ci * height + row + y) * width + col;
            out[dst..dst + w].copy_from_slice(&x.data()[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
    Tensor::new(&[c, height, width], out)
}

/// Scales every row of a matrix to unit L2 norm; zero rows stay zero.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(out)
}

pub(crate) fn row_norms(x: &Tensor) -> Vec<f32> {
    let n = *x.shape().last().unwrap_or(&1);
    x.data().chunks(n).map(|r| dot(r, r).sqrt()).collect()
}
