//! Property tests for the numerics layer: every primitive's backward agrees
//! with central finite differences on random small inputs, and the softmax /
//! rotary invariants hold.

use proptest::prelude::*;
use treelm::numerics::{grad_check, ops, Tape, Tensor};

const GRAD_TOL: f64 = 1e-6;

fn small_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n..=n)
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_backward_matches_fd(a in small_vals(6), b in small_vals(8)) {
        let pa = tensor(vec![3, 2], a);
        let pb = tensor(vec![2, 4], b);
        let mut f = |p: &[Tensor], tape: &mut Tape| {
            let a = tape.param(0, p[0].clone());
            let b = tape.param(1, p[1].clone());
            let c = tape.matmul(a, b)?;
            Ok(tape.sum_all(c))
        };
        let err = grad_check(&mut f, &[pa, pb], 1e-5).unwrap();
        prop_assert!(err <= GRAD_TOL, "matmul grad error {err}");
    }

    #[test]
    fn add_mul_silu_backward_matches_fd(a in small_vals(6), b in small_vals(6)) {
        let pa = tensor(vec![2, 3], a);
        let pb = tensor(vec![2, 3], b);
        let mut f = |p: &[Tensor], tape: &mut Tape| {
            let a = tape.param(0, p[0].clone());
            let b = tape.param(1, p[1].clone());
            let s = tape.add(a, b)?;
            let m = tape.mul(s, b)?;
            let o = tape.silu(m);
            Ok(tape.sum_all(o))
        };
        let err = grad_check(&mut f, &[pa, pb], 1e-5).unwrap();
        prop_assert!(err <= GRAD_TOL, "add/mul/silu grad error {err}");
    }

    #[test]
    fn rms_norm_backward_matches_fd(x in small_vals(8), g in small_vals(4)) {
        let px = tensor(vec![2, 4], x);
        let pg = tensor(vec![4], g);
        let mut f = |p: &[Tensor], tape: &mut Tape| {
            let x = tape.param(0, p[0].clone());
            let g = tape.param(1, p[1].clone());
            let y = tape.rms_norm(x, g, 1e-5)?;
            Ok(tape.sum_all(y))
        };
        let err = grad_check(&mut f, &[px, pg], 1e-5).unwrap();
        prop_assert!(err <= GRAD_TOL, "rms_norm grad error {err}");
    }

    #[test]
    fn rope_backward_matches_fd(x in small_vals(8), p0 in 0usize..16, p1 in 0usize..16) {
        let px = tensor(vec![2, 4], x);
        let positions = vec![p0, p1];
        let mut f = |p: &[Tensor], tape: &mut Tape| {
            let x = tape.param(0, p[0].clone());
            let y = tape.rope(x, &positions, 10000.0)?;
            Ok(tape.sum_all(y))
        };
        let err = grad_check(&mut f, &[px], 1e-5).unwrap();
        prop_assert!(err <= GRAD_TOL, "rope grad error {err}");
    }

    #[test]
    fn softmax_backward_matches_fd(x in small_vals(8)) {
        let px = tensor(vec![2, 4], x);
        let w = tensor(vec![2, 4], vec![0.3, -1.0, 0.7, 0.2, 1.1, -0.4, 0.0, 0.9]);
        let mut f = |p: &[Tensor], tape: &mut Tape| {
            let x = tape.param(0, p[0].clone());
            let s = tape.softmax_rows(x);
            let wv = tape.constant(w.clone());
            let m = tape.mul(s, wv)?;
            Ok(tape.sum_all(m))
        };
        let err = grad_check(&mut f, &[px], 1e-5).unwrap();
        prop_assert!(err <= GRAD_TOL, "softmax grad error {err}");
    }

    #[test]
    fn attention_backward_matches_fd(
        q in small_vals(6),
        k in small_vals(8),
        v in small_vals(8),
        causal in any::<bool>(),
    ) {
        // causal requires square q/k; use 3x3 in that case.
        let (tq, tk) = if causal { (4, 4) } else { (3, 4) };
        let q = tensor(vec![tq, 2], {
            let mut q = q;
            q.resize(tq * 2, 0.5);
            q
        });
        let k = tensor(vec![tk, 2], k);
        let v = tensor(vec![tk, 2], v);
        let mut f = |p: &[Tensor], tape: &mut Tape| {
            let q = tape.param(0, p[0].clone());
            let k = tape.param(1, p[1].clone());
            let v = tape.param(2, p[2].clone());
            let o = tape.attention(q, k, v, causal)?;
            Ok(tape.sum_all(o))
        };
        let err = grad_check(&mut f, &[q, k, v], 1e-5).unwrap();
        prop_assert!(err <= GRAD_TOL, "attention grad error {err}");
    }

    #[test]
    fn lm_loss_backward_matches_fd(x in small_vals(12)) {
        let logits = tensor(vec![3, 4], x);
        let targets = [1u32, 3u32];
        let mask = [true, true];
        let mut f = |p: &[Tensor], tape: &mut Tape| {
            let l = tape.param(0, p[0].clone());
            tape.lm_loss(l, &targets, &mask)
        };
        let err = grad_check(&mut f, &[logits], 1e-5).unwrap();
        prop_assert!(err <= GRAD_TOL, "lm_loss grad error {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        x in small_vals(12),
        shift in -50.0..50.0f64,
    ) {
        let t = tensor(vec![3, 4], x.clone());
        let s = ops::softmax_rows(&t);
        for i in 0..3 {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
        }
        // Adding a constant to one row leaves its softmax unchanged.
        let shifted: Vec<f64> = x.iter().enumerate()
            .map(|(i, &v)| if i < 4 { v + shift } else { v })
            .collect();
        let s2 = ops::softmax_rows(&tensor(vec![3, 4], shifted));
        for (a, b) in s.row(0).iter().zip(s2.row(0)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rope_preserves_pair_norms_and_composes(
        x in small_vals(8),
        p1 in 0usize..64,
        p2 in 0usize..64,
    ) {
        let t = tensor(vec![1, 8], x);
        let base = 10000.0;
        let y = ops::rope_apply(&t, &[p1], base).unwrap();
        for i in 0..4 {
            let n0 = (t.data()[2 * i].powi(2) + t.data()[2 * i + 1].powi(2)).sqrt();
            let n1 = (y.data()[2 * i].powi(2) + y.data()[2 * i + 1].powi(2)).sqrt();
            prop_assert!((n0 - n1).abs() <= 1e-12, "pair norm changed: {n0} vs {n1}");
        }
        // rope(x, p1 + p2) == rope(rope(x, p1), p2)
        let via_sum = ops::rope_apply(&t, &[p1 + p2], base).unwrap();
        let via_steps = ops::rope_apply(&y, &[p2], base).unwrap();
        for (a, b) in via_sum.data().iter().zip(via_steps.data()) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
}
