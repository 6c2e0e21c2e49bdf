//! Pure tensor operations.
//!
//! Everything here is deterministic f64 math on immutable tensors. The
//! attention primitives are the only instrumented hot spots: they tally
//! score and value-mixing MACs into [`super::profile`]; `matmul` tallies
//! projection MACs separately.

use crate::error::{Error, Result};

use super::profile;
use super::tensor::Tensor;

/// `a[m×k] · b[k×n] -> [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    profile::record_proj_macs((m * n * k) as u64);

    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    let t = Tensor::from_vec(vec![m, n], out)?;
    t.debug_check_finite("matmul");
    Ok(t)
}

/// `aᵀ[k×m] · b[k×n] -> [m×n]` without materializing the transpose.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul_at_b",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    profile::record_proj_macs((m * n * k) as u64);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `a[m×k] · bᵀ[n×k] -> [m×n]` without materializing the transpose.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "matmul_a_bt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    profile::record_proj_macs((m * n * k) as u64);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation `x·σ(x)`, elementwise.
pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("shape preserved")
}

/// Row-wise softmax with per-row max subtraction; each row sums to 1.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let rows = x.rows();
    let cols = x.cols();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = x.row(i);
        let o = &mut out[i * cols..(i + 1) * cols];
        softmax_into(row, o);
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("shape preserved")
}

#[inline]
fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Rotary position embedding on interleaved pairs `(2i, 2i+1)`:
/// pair `i` of row `t` is rotated counterclockwise by
/// `positions[t] · base^(−2i/d)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    if d % 2 != 0 {
        return Err(Error::config(format!(
            "rope_apply requires an even feature dimension, got {d}"
        )));
    }
    if positions.len() != t {
        return Err(Error::usage(format!(
            "rope_apply: {} positions for {} rows",
            positions.len(),
            t
        )));
    }
    if base <= 0.0 {
        return Err(Error::config("rope_apply: theta base must be positive"));
    }
    let mut out = x.data().to_vec();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut out[r * d..(r + 1) * d];
        rotate_row(row, pos as f64, base);
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

#[inline]
pub(crate) fn rotate_row(row: &mut [f64], pos: f64, base: f64) {
    let d = row.len();
    for i in 0..d / 2 {
        let theta = pos * base.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = theta.sin_cos();
        let a = row[2 * i];
        let b = row[2 * i + 1];
        row[2 * i] = a * cos - b * sin;
        row[2 * i + 1] = a * sin + b * cos;
    }
}

/// RMS normalization: each row divided by `sqrt(mean(x²) + eps)`, scaled by `gain`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    if gain.numel() != d {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::config("rms_norm: eps must be positive"));
    }
    let g = gain.data();
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let row = x.row(i);
        let ms = dot(row, row) / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            o[j] = row[j] * inv * g[j];
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Single-head scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
///
/// With `causal` set, row `i` attends only to key positions `≤ i`; the flag
/// is only meaningful for self-attention with `t_q == t_k`. Score and mix
/// MACs are tallied as full `t_q·t_k·d` rectangles (the implementation
/// computes every pair and masks afterwards).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    Ok(attention_with_probs(q, k, v, causal)?.0)
}

pub(crate) fn attention_with_probs(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
) -> Result<(Tensor, Tensor)> {
    let (tq, dh) = (q.rows(), q.cols());
    let tk = k.rows();
    if k.cols() != dh || v.cols() != dh || v.rows() != tk {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if causal && tq != tk {
        return Err(Error::usage(format!(
            "causal attention requires t_q == t_k, got {tq} vs {tk}"
        )));
    }
    profile::record_score_macs((tq * tk * dh) as u64);
    profile::record_mix_macs((tq * tk * dh) as u64);

    let scale = 1.0 / (dh as f64).sqrt();
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();

    let mut probs = vec![0.0; tq * tk];
    let mut out = vec![0.0; tq * dh];
    let mut scores = vec![0.0; tk];
    for i in 0..tq {
        let qrow = &qd[i * dh..(i + 1) * dh];
        for j in 0..tk {
            scores[j] = dot(qrow, &kd[j * dh..(j + 1) * dh]) * scale;
        }
        if causal {
            for s in scores.iter_mut().skip(i + 1) {
                *s = f64::NEG_INFINITY;
            }
        }
        let prow = &mut probs[i * tk..(i + 1) * tk];
        softmax_into(&scores, prow);
        let orow = &mut out[i * dh..(i + 1) * dh];
        for (j, &p) in prow.iter().enumerate() {
            let vrow = &vd[j * dh..(j + 1) * dh];
            for (o, &vv) in orow.iter_mut().zip(vrow.iter()) {
                *o += p * vv;
            }
        }
    }
    let out = Tensor::from_vec(vec![tq, dh], out)?;
    out.debug_check_finite("attention");
    let probs = Tensor::from_vec(vec![tq, tk], probs)?;
    Ok((out, probs))
}

/// Streaming attention: identical contract and MAC tally as [`attention`]
/// but never materializes the probability matrix, so it handles sequence
/// lengths where `t_q·t_k` would not fit in memory. Inference only.
pub fn attention_streaming(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    let (tq, dh) = (q.rows(), q.cols());
    let tk = k.rows();
    if k.cols() != dh || v.cols() != dh || v.rows() != tk {
        return Err(Error::ShapeMismatch {
            op: "attention_streaming",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if causal && tq != tk {
        return Err(Error::usage(format!(
            "causal attention requires t_q == t_k, got {tq} vs {tk}"
        )));
    }
    profile::record_score_macs((tq * tk * dh) as u64);
    profile::record_mix_macs((tq * tk * dh) as u64);

    let scale = 1.0 / (dh as f64).sqrt();
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![0.0; tq * dh];
    let mut scores = vec![0.0; tk];
    let mut prow = vec![0.0; tk];
    for i in 0..tq {
        let qrow = &qd[i * dh..(i + 1) * dh];
        for j in 0..tk {
            scores[j] = dot(qrow, &kd[j * dh..(j + 1) * dh]) * scale;
        }
        if causal {
            for s in scores.iter_mut().skip(i + 1) {
                *s = f64::NEG_INFINITY;
            }
        }
        softmax_into(&scores, &mut prow);
        let orow = &mut out[i * dh..(i + 1) * dh];
        for (j, &p) in prow.iter().enumerate() {
            let vrow = &vd[j * dh..(j + 1) * dh];
            for (o, &vv) in orow.iter_mut().zip(vrow.iter()) {
                *o += p * vv;
            }
        }
    }
    Tensor::from_vec(vec![tq, dh], out)
}

/// Looks up embedding rows for a token sequence.
pub fn embedding_gather(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let vocab = table.rows();
    let d = table.cols();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if (id as usize) >= vocab {
            return Err(Error::input(format!(
                "token id {id} out of range for vocab size {vocab}"
            )));
        }
        out.extend_from_slice(table.row(id as usize));
    }
    Tensor::from_vec(vec![ids.len(), d], out)
}

/// Gathers rows of a 2-D tensor at the given indices.
pub fn gather_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let d = x.cols();
    let rows = x.rows();
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= rows {
            return Err(Error::usage(format!(
                "gather_rows: index {i} out of range for {rows} rows"
            )));
        }
        out.extend_from_slice(x.row(i));
    }
    Tensor::from_vec(vec![indices.len(), d], out)
}

/// Stacks 2-D tensors with equal widths on top of each other.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::usage("concat_rows of zero tensors"));
    }
    let d = parts[0].cols();
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        if p.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += p.rows();
        out.extend_from_slice(p.data());
    }
    Tensor::from_vec(vec![rows, d], out)
}

/// Takes columns `[start, end)` of a 2-D tensor.
pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    if start >= end || end > d {
        return Err(Error::usage(format!(
            "slice_cols: range {start}..{end} invalid for width {d}"
        )));
    }
    let w = end - start;
    let mut out = Vec::with_capacity(t * w);
    for i in 0..t {
        out.extend_from_slice(&x.row(i)[start..end]);
    }
    Tensor::from_vec(vec![t, w], out)
}

/// Concatenates 2-D tensors with equal row counts side by side.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::usage("concat_cols of zero tensors"));
    }
    let t = parts[0].rows();
    for p in parts {
        if p.rows() != t {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let w: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(t * w);
    for i in 0..t {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::from_vec(vec![t, w], out)
}
