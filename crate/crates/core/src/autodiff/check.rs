//! Finite-difference oracles for the tape.

use super::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `|a - n| / max(1, |a|, |n|)`, maximised over paired coordinates. NaN in
/// either input yields NaN.
pub fn max_relative_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> S {
    let mut worst = S::zero();
    for (&a, &n) in analytic.iter().zip(numeric) {
        let err = (a - n).abs() / S::one().max(a.abs()).max(n.abs());
        if err.is_nan() {
            return S::nan();
        }
        worst = worst.max(err);
    }
    worst
}

/// Central differences of a scalar function of several tensors.
pub fn finite_difference_gradient<S, F>(f: &F, params: &[Tensor<S>], eps: S) -> Result<Vec<Tensor<S>>>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    let eval = |values: &[Tensor<S>]| -> Result<S> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, S>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut out = Vec::with_capacity(params.len());
    for (k, p) in params.iter().enumerate() {
        let mut grad = vec![S::zero(); p.len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let mut shifted = params.to_vec();
            let mut data = p.to_vec();
            data[i] = p.data()[i] + eps;
            shifted[k] = Tensor::new(p.shape(), data.clone())?;
            let up = eval(&shifted)?;
            data[i] = p.data()[i] - eps;
            shifted[k] = Tensor::new(p.shape(), data)?;
            let down = eval(&shifted)?;
            *g = (up - down) / (eps + eps);
        }
        out.push(Tensor::new(p.shape(), grad)?);
    }
    Ok(out)
}

/// Maximum relative error between reverse-mode gradients of `f` and
/// central finite differences with step `eps`.
pub fn grad_check<S, F>(f: F, params: &[Tensor<S>], eps: S) -> Result<S>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    assert!(eps > S::zero(), "grad_check needs eps > 0");
    let tape = Tape::new();
    let vars: Vec<Var<'_, S>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let analytic = tape.grad(loss, &vars)?;
    let numeric = finite_difference_gradient(&f, params, eps)?;
    let a: Vec<S> = analytic.iter().flat_map(|t| t.to_vec()).collect();
    let n: Vec<S> = numeric.iter().flat_map(|t| t.to_vec()).collect();
    Ok(max_relative_error(&a, &n))
}

/// `(∂f/∂x)·v` by a forward sweep.
pub fn jvp<S, F>(f: F, x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, Var<'t, S>) -> Result<Var<'t, S>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let tangent = tape.constant(v.clone());
    let y = f(&tape, xv)?;
    Ok(tape.jvp(y, xv, tangent)?.value())
}
