//! Reverse-mode autodiff over a linear tape.
//!
//! Forward operations execute the pure kernels from [`super::ops`] and
//! record one node per produced value, in topological (creation) order.
//! `backward` walks the nodes once, in reverse, accumulating vector-Jacobian
//! products; leaves tagged with a parameter index collect gradients.
//!
//! One tape per training step, single-threaded by contract. A tape built
//! with [`Tape::no_grad`] runs the same forward kernels but records no
//! backward bookkeeping.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::ops;
use super::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf {
        param: Option<usize>,
    },
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Silu {
        x: ValueId,
    },
    RmsNorm {
        x: ValueId,
        gain: ValueId,
        eps: f64,
    },
    Rope {
        x: ValueId,
        positions: Vec<usize>,
        base: f64,
    },
    Softmax {
        x: ValueId,
    },
    Attention {
        q: ValueId,
        k: ValueId,
        v: ValueId,
        probs: Tensor,
    },
    SliceCols {
        x: ValueId,
        start: usize,
    },
    ConcatCols {
        parts: Vec<ValueId>,
    },
    Embedding {
        table: ValueId,
        ids: Vec<u32>,
    },
    LmLoss {
        logits: ValueId,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Tensor,
        n_masked: usize,
    },
    SumAll {
        x: ValueId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Gradients keyed by parameter index, produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    by_param: HashMap<usize, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, param: usize) -> Option<&[f64]> {
        self.by_param.get(&param).map(|v| v.as_slice())
    }

    /// Gradient for a parameter, zeros if the parameter never received one
    /// (frozen or unused parameters have exactly-zero gradients).
    pub fn get_or_zeros(&self, param: usize, numel: usize) -> Vec<f64> {
        match self.by_param.get(&param) {
            Some(v) => v.clone(),
            None => vec![0.0; numel],
        }
    }

    pub fn params(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_param.keys().copied()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        let op = if self.grad_enabled { op } else { Op::Leaf { param: None } };
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Records a parameter leaf; `backward` collects its gradient under `param`.
    pub fn param(&mut self, param: usize, value: Tensor) -> ValueId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: Some(param) },
        });
        ValueId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn silu(&mut self, x: ValueId) -> ValueId {
        let v = ops::silu(self.value(x));
        self.push(v, Op::Silu { x })
    }

    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId, eps: f64) -> Result<ValueId> {
        let v = ops::rms_norm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(v, Op::RmsNorm { x, gain, eps }))
    }

    pub fn rope(&mut self, x: ValueId, positions: &[usize], base: f64) -> Result<ValueId> {
        let v = ops::rope_apply(self.value(x), positions, base)?;
        Ok(self.push(
            v,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                base,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: ValueId) -> ValueId {
        let v = ops::softmax_rows(self.value(x));
        self.push(v, Op::Softmax { x })
    }

    pub fn attention(&mut self, q: ValueId, k: ValueId, v: ValueId, causal: bool) -> Result<ValueId> {
        let (out, probs) =
            ops::attention_with_probs(self.value(q), self.value(k), self.value(v), causal)?;
        Ok(self.push(out, Op::Attention { q, k, v, probs }))
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let v = ops::slice_cols(self.value(x), start, end)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p.0].value).collect();
        let v = ops::concat_cols(&tensors)?;
        Ok(self.push(
            v,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn embedding(&mut self, table: ValueId, ids: &[u32]) -> Result<ValueId> {
        let v = ops::embedding_gather(self.value(table), ids)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets[r]` under row `r` of
    /// `logits`, averaged over rows with `mask[r]` set.
    pub fn lm_loss(&mut self, logits: ValueId, targets: &[u32], mask: &[bool]) -> Result<ValueId> {
        let lg = self.value(logits);
        let (t, vocab) = (lg.rows(), lg.cols());
        if targets.len() != mask.len() || targets.len() > t {
            return Err(Error::usage(format!(
                "lm_loss: {} targets / {} mask entries for {} logit rows",
                targets.len(),
                mask.len(),
                t
            )));
        }
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(Error::usage("lm_loss: empty mask"));
        }
        for (&tok, &m) in targets.iter().zip(mask) {
            if m && tok as usize >= vocab {
                return Err(Error::input(format!(
                    "lm_loss: target id {tok} out of range for vocab {vocab}"
                )));
            }
        }

        let mut probs = vec![0.0; targets.len() * vocab];
        let mut loss = 0.0;
        for r in 0..targets.len() {
            if !mask[r] {
                continue;
            }
            let row = lg.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            for (p, &v) in prow.iter_mut().zip(row.iter()) {
                let e = (v - max).exp();
                *p = e;
                sum += e;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            let lse = max + sum.ln();
            loss += lse - row[targets[r] as usize];
        }
        loss /= n_masked as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("lm_loss".into()));
        }
        let probs = Tensor::from_vec(vec![targets.len(), vocab], probs)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::LmLoss {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                n_masked,
            },
        ))
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Reverse pass from a scalar output. Visits each node at most once, in
    /// reverse topological order, and returns gradients for parameter leaves.
    pub fn backward(&self, output: ValueId) -> Result<Grads> {
        if !self.grad_enabled {
            return Err(Error::usage("backward on a no-grad tape"));
        }
        let out_val = &self.nodes[output.0].value;
        if !out_val.is_scalar() {
            return Err(Error::usage(format!(
                "backward requires a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        let mut collected = Grads::default();
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        match collected.by_param.get_mut(p) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    *a += b;
                                }
                            }
                            None => {
                                collected.by_param.insert(*p, g);
                            }
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let gt = Tensor::from_vec(node_shape(self, idx), g)?;
                    let da = ops::matmul_a_bt(&gt, self.value(*b))?;
                    let db = ops::matmul_at_b(self.value(*a), &gt)?;
                    accumulate(&mut grads, a.0, da.data());
                    accumulate(&mut grads, b.0, db.data());
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, a.0, &da);
                    accumulate(&mut grads, b.0, &db);
                }
                Op::Silu { x } => {
                    let xv = self.value(*x).data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(gy, &v)| {
                            let s = ops::sigmoid(v);
                            gy * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::RmsNorm { x, gain, eps } => {
                    let xt = self.value(*x);
                    let gainv = self.value(*gain).data();
                    let (t, d) = (xt.rows(), xt.cols());
                    let mut dx = vec![0.0; t * d];
                    let mut dgain = vec![0.0; d];
                    for i in 0..t {
                        let row = xt.row(i);
                        let grow = &g[i * d..(i + 1) * d];
                        let ms = ops::dot(row, row) / d as f64;
                        let inv = 1.0 / (ms + eps).sqrt();
                        // Σ_j dy_ij · g_j · x_ij
                        let mut proj = 0.0;
                        for j in 0..d {
                            proj += grow[j] * gainv[j] * row[j];
                            dgain[j] += grow[j] * row[j] * inv;
                        }
                        let coef = inv * inv * inv / d as f64;
                        let dxrow = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxrow[j] = grow[j] * gainv[j] * inv - coef * row[j] * proj;
                        }
                    }
                    accumulate(&mut grads, x.0, &dx);
                    accumulate(&mut grads, gain.0, &dgain);
                }
                Op::Rope { x, positions, base } => {
                    // Rotation is orthogonal: pull the gradient back by the
                    // inverse rotation.
                    let d = self.value(*x).cols();
                    let mut dx = g.clone();
                    for (r, &pos) in positions.iter().enumerate() {
                        ops::rotate_row(&mut dx[r * d..(r + 1) * d], -(pos as f64), *base);
                    }
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let (t, d) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; t * d];
                    for i in 0..t {
                        let yrow = y.row(i);
                        let grow = &g[i * d..(i + 1) * d];
                        let inner = ops::dot(grow, yrow);
                        let dxrow = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxrow[j] = yrow[j] * (grow[j] - inner);
                        }
                    }
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Attention { q, k, v, probs } => {
                    let qt = self.value(*q);
                    let kt = self.value(*k);
                    let vt = self.value(*v);
                    let (tq, dh) = (qt.rows(), qt.cols());
                    let tk = kt.rows();
                    let scale = 1.0 / (dh as f64).sqrt();
                    let gt = Tensor::from_vec(vec![tq, dh], g)?;
                    // dV = Pᵀ·dO
                    let dv = ops::matmul_at_b(probs, &gt)?;
                    // dP = dO·Vᵀ, then softmax backward row-wise → dS
                    let dp = ops::matmul_a_bt(&gt, vt)?;
                    let mut ds = vec![0.0; tq * tk];
                    for i in 0..tq {
                        let prow = probs.row(i);
                        let dprow = dp.row(i);
                        let inner = ops::dot(dprow, prow);
                        let dsrow = &mut ds[i * tk..(i + 1) * tk];
                        for j in 0..tk {
                            dsrow[j] = prow[j] * (dprow[j] - inner) * scale;
                        }
                    }
                    let ds = Tensor::from_vec(vec![tq, tk], ds)?;
                    let dq = ops::matmul(&ds, kt)?;
                    let dk = ops::matmul_at_b(&ds, qt)?;
                    accumulate(&mut grads, q.0, dq.data());
                    accumulate(&mut grads, k.0, dk.data());
                    accumulate(&mut grads, v.0, dv.data());
                }
                Op::SliceCols { x, start } => {
                    let xt = self.value(*x);
                    let (t, d) = (xt.rows(), xt.cols());
                    let w = node.value.cols();
                    let mut dx = vec![0.0; t * d];
                    for i in 0..t {
                        dx[i * d + start..i * d + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::ConcatCols { parts } => {
                    let t = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for part in parts {
                        let w = self.value(*part).cols();
                        let mut dp = vec![0.0; t * w];
                        for i in 0..t {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads, part.0, &dp);
                        offset += w;
                    }
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let mut dt = vec![0.0; tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, table.0, &dt);
                }
                Op::LmLoss {
                    logits,
                    targets,
                    mask,
                    probs,
                    n_masked,
                } => {
                    let lg = self.value(*logits);
                    let (t, vocab) = (lg.rows(), lg.cols());
                    let gy = g[0] / *n_masked as f64;
                    let mut dl = vec![0.0; t * vocab];
                    for r in 0..targets.len() {
                        if !mask[r] {
                            continue;
                        }
                        let prow = probs.row(r);
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            drow[j] = prow[j] * gy;
                        }
                        drow[targets[r] as usize] -= gy;
                    }
                    accumulate(&mut grads, logits.0, &dl);
                }
                Op::SumAll { x } => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, x.0, &vec![g[0]; n]);
                }
            }
        }
        Ok(collected)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn node_shape(tape: &Tape, idx: usize) -> Vec<usize> {
    tape.nodes[idx].value.shape().to_vec()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, delta: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => grads[idx] = Some(delta.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient_is_exact() {
        // f(w) = w·c with c = [3,4]ᵀ → df/dw = c.
        let mut tape = Tape::new();
        let w = tape.param(0, Tensor::from_vec(vec![1, 2], vec![0.5, -1.0]).unwrap());
        let c = tape.constant(Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(w, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(0).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(0, Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(0, Tensor::scalar(2.0));
        let _frozen = tape.param(1, Tensor::scalar(5.0));
        let y = tape.sum_all(w);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get_or_zeros(1, 1), vec![0.0]);
        assert_eq!(grads.get(0).unwrap(), &[1.0]);
    }

    #[test]
    fn repeated_param_accumulates() {
        // y = sum(w) + sum(w) → dw = 2.
        let mut tape = Tape::new();
        let w1 = tape.param(0, Tensor::scalar(1.5));
        let w2 = tape.param(0, Tensor::scalar(1.5));
        let a = tape.add(w1, w2).unwrap();
        let y = tape.sum_all(a);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(0).unwrap(), &[2.0]);
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let mut tape = Tape::no_grad();
        let w = tape.param(0, Tensor::scalar(1.0));
        let y = tape.sum_all(w);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn lm_loss_uniform_logits_is_log_vocab() {
        let vocab = 7;
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![3, vocab]));
        let loss = tape
            .lm_loss(logits, &[1, 2], &[true, true])
            .unwrap();
        let v = tape.value(loss).scalar_value().unwrap();
        assert!((v - (vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_confident_correct_is_near_zero() {
        let vocab = 4;
        let mut data = vec![0.0; vocab];
        data[2] = 50.0;
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![1, vocab], data).unwrap());
        let loss = tape.lm_loss(logits, &[2], &[true]).unwrap();
        assert!(tape.value(loss).scalar_value().unwrap() < 1e-12);
    }

    #[test]
    fn lm_loss_matches_log_sum_exp_oracle() {
        // Two scored rows over a 3-token vocabulary, straight-line arithmetic.
        let logits = vec![0.3, -0.7, 1.1, 0.0, 2.0, -1.0];
        let targets = [2u32, 0u32];
        let oracle: f64 = {
            let nll = |row: &[f64], t: usize| -> f64 {
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[t]
            };
            (nll(&logits[0..3], 2) + nll(&logits[3..6], 0)) / 2.0
        };
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_vec(vec![2, 3], logits).unwrap());
        let loss = tape.lm_loss(l, &targets, &[true, true]).unwrap();
        assert!((tape.value(loss).scalar_value().unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_rejects_empty_mask() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(
            tape.lm_loss(logits, &[0, 1], &[false, false]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn masked_positions_do_not_affect_loss_or_grad() {
        let base = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let mut perturbed = base.clone();
        perturbed[3] += 100.0; // row 1 is masked out
        let mask = [true, false];
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let l = tape.param(0, Tensor::from_vec(vec![2, 3], data).unwrap());
            let loss = tape.lm_loss(l, &[1, 2], &mask).unwrap();
            let v = tape.value(loss).scalar_value().unwrap();
            let g = tape.backward(loss).unwrap().get(0).unwrap().to_vec();
            (v, g)
        };
        let (l1, g1) = run(base);
        let (l2, g2) = run(perturbed);
        assert_eq!(l1, l2);
        assert_eq!(&g1[0..3], &g2[0..3]);
        assert!(g2[3..6].iter().all(|&v| v == 0.0));
    }
}
