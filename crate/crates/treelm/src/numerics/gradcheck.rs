//! Central-finite-difference gradient verification.

use crate::error::{Error, Result};

use super::tape::{Tape, ValueId};
use super::tensor::Tensor;

/// Maximum relative error between analytic gradients and central finite
/// differences, over every element of every checked parameter.
///
/// The closure must rebuild the scalar graph from scratch on each call,
/// registering checked parameter `i` on the tape via `tape.param(i, ...)`
/// with the tensor it was handed. Parameters outside the slice are captured
/// state: they are held constant by both routes.
pub fn grad_check<F>(f: &mut F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&[Tensor], &mut Tape) -> Result<ValueId>,
{
    let keys: Vec<usize> = (0..params.len()).collect();
    grad_check_mapped(f, params, &keys, h)
}

/// [`grad_check`] for closures that register parameters under their own
/// tape keys (e.g. parameter-store ids): `keys[i]` is the tape key the
/// closure uses for checked parameter `i`.
pub fn grad_check_mapped<F>(f: &mut F, params: &[Tensor], keys: &[usize], h: f64) -> Result<f64>
where
    F: FnMut(&[Tensor], &mut Tape) -> Result<ValueId>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::usage(format!(
            "grad_check step h={h} outside [1e-6, 1e-4]"
        )));
    }
    if keys.len() != params.len() {
        return Err(Error::usage(format!(
            "grad_check: {} keys for {} parameters",
            keys.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        p.check_finite(&format!("grad_check param {i}"))?;
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let out = f(params, &mut tape)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::usage(format!(
            "grad_check requires a scalar-valued graph, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;

    let eval = |params: &[Tensor], f: &mut F| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let out = f(params, &mut tape)?;
        tape.value(out).scalar_value()
    };

    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        let analytic = grads.get_or_zeros(keys[i], params[i].numel());
        let base = params[i].data().to_vec();
        for e in 0..base.len() {
            let mut work = params.to_vec();
            let mut plus = base.clone();
            plus[e] += h;
            work[i] = Tensor::from_vec(params[i].shape().to_vec(), plus)?;
            let f_plus = eval(&work, f)?;

            let mut minus = base.clone();
            minus[e] -= h;
            work[i] = Tensor::from_vec(params[i].shape().to_vec(), minus)?;
            let f_minus = eval(&work, f)?;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let rel = (analytic[e] - numeric).abs() / (analytic[e].abs() + numeric.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
