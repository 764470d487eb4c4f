//! Central finite-difference verification of the backward pass.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Compare analytic gradients of a scalar-valued `f` against central finite
/// differences at every coordinate of every tensor in `inputs`.
///
/// Returns the maximum over coordinates of
/// `|g_analytic − g_fd| / max(1e-12, |g_analytic| + |g_fd|)`.
///
/// Meant to run in `f64`: with `step` around 1e-5 the truncation and rounding
/// error of the difference quotient stays well below the 1e-4 gate used by
/// the test suite.
pub fn grad_check<E, F>(f: F, inputs: &[Tensor<E>], step: E) -> Result<f64>
where
    E: Scalar,
    F: Fn(&[Tensor<E>]) -> Result<Tensor<E>>,
{
    let loss = f(inputs)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    let grads = loss.backward()?;

    let mut max_err = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(input);
        let base = input.to_vec();
        for c in 0..base.len() {
            let mut plus = base.clone();
            plus[c] += step;
            let mut minus = base.clone();
            minus[c] -= step;
            let fp = eval_with(&f, inputs, which, input.shape(), plus)?;
            let fm = eval_with(&f, inputs, which, input.shape(), minus)?;
            let fd = (fp - fm).to_f64() / (2.0 * step.to_f64());
            let ga = analytic[c].to_f64();
            let denom = 1e-12f64.max(ga.abs() + fd.abs());
            let err = (ga - fd).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

fn eval_with<E, F>(
    f: &F,
    inputs: &[Tensor<E>],
    which: usize,
    shape: &[usize],
    values: Vec<E>,
) -> Result<E>
where
    E: Scalar,
    F: Fn(&[Tensor<E>]) -> Result<Tensor<E>>,
{
    let mut probe: Vec<Tensor<E>> = inputs.to_vec();
    probe[which] = Tensor::var_from_vec(shape, values)?;
    f(&probe)?.item()
}

/// Finite-difference check against parameters a model holds internally:
/// `f` closes over the model, and each listed parameter tensor is perturbed
/// in place for the difference quotients (and restored afterwards).
pub fn grad_check_params<E, F>(f: F, params: &[Tensor<E>], step: E) -> Result<f64>
where
    E: Scalar,
    F: Fn() -> Result<Tensor<E>>,
{
    let loss = f()?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check_params needs a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    for p in params {
        p.zero_grad();
    }
    loss.backward()?;

    let mut max_err = 0.0f64;
    for param in params {
        let analytic = param.grad().unwrap_or_else(|| vec![E::zero(); param.numel()]);
        let base = param.to_vec();
        for c in 0..base.len() {
            let nudge = |delta: E| -> Result<E> {
                let mut probe = base.clone();
                probe[c] += delta;
                param.set_data(&probe)?;
                let out = f()?.item();
                param.set_data(&base)?;
                out
            };
            let fp = nudge(step)?;
            let fm = nudge(-step)?;
            let fd = (fp - fm).to_f64() / (2.0 * step.to_f64());
            let ga = analytic[c].to_f64();
            let denom = 1e-12f64.max(ga.abs() + fd.abs());
            let err = (ga - fd).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
        param.zero_grad();
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::var_from_vec(&[3, 4], x).unwrap();
        let err = grad_check(|ins| Ok(ins[0].mul(&ins[0])?.sum()), &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {}", err);
    }

    #[test]
    fn linear_function_is_fd_exact_to_rounding() {
        let w = Tensor::from_vec(&[4], vec![0.3, -1.1, 0.7, 2.0]).unwrap();
        let x = Tensor::var_from_vec(&[4], vec![0.5, 0.25, -0.75, 1.5]).unwrap();
        let err = grad_check(|ins| Ok(ins[0].mul(&w)?.sum()), &[x], 1e-5).unwrap();
        // central differences are exact for linear maps up to rounding
        assert!(err < 1e-9, "max rel err {}", err);
    }
}
