//! Per-task posteriors over head-weight updates.

mod cnf;
mod gaussian;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use cnf::{
    cnf_forward, cnf_inverse, cnf_sample_and_kl, integrate, CnfSample, Dynamics, FlowNet, FlowResult,
    FlowSpec, LinearDynamics, TraceMode,
};
pub use gaussian::GaussianPosterior;

/// i.i.d. standard normal draws.
pub fn standard_normal<S: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            S::lit(e)
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// i.i.d. ±1 draws.
pub fn rademacher<S: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<bool>() { S::one() } else { -S::one() })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `log N(x | 0, var·I)` for each row of `x: [B, d]`.
pub(crate) fn log_normal_rows<S: Scalar>(x: crate::autodiff::Var<'_, S>, var: S) -> crate::Result<crate::autodiff::Var<'_, S>> {
    let d = x.shape()[1];
    let c = S::lit(-0.5 * d as f64 * (2.0 * std::f64::consts::PI * var.as_f64()).ln());
    Ok(x.square().sum_cols()?.scale(S::lit(-0.5) / var).add_scalar(c))
}

#[cfg(test)]
mod tests;
