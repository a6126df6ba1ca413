use rand::Rng;

use super::standard_normal;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::hypernet::SIGMA_FLOOR;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Diagonal Gaussian `N(mean_total, diag(sigma²))` over θ′.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior<'t, S> {
    pub mean_total: Var<'t, S>,
    pub sigma: Var<'t, S>,
}

impl<'t, S: Scalar> GaussianPosterior<'t, S> {
    /// `mean_total = θ^H + μ`, `sigma = softplus(ρ) + floor`.
    pub fn from_hyper(theta_head: Var<'t, S>, mu: Var<'t, S>, rho: Var<'t, S>) -> Result<Self> {
        Ok(GaussianPosterior {
            mean_total: theta_head.add(mu)?,
            sigma: rho.softplus().add_scalar(S::lit(SIGMA_FLOOR)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean_total.value().len()
    }

    /// `mean_total + sigma ⊙ eps` for each row of `eps: [p, d]`.
    pub fn sample_with(&self, eps: &Tensor<S>) -> Result<Var<'t, S>> {
        let (p, d) = eps.dims2("gaussian_sample")?;
        if d != self.dim() {
            return Err(Error::dim("gaussian_sample", &[self.dim()], eps.shape()));
        }
        let tape = self.mean_total.tape();
        self.mean_total
            .broadcast_rows(p)?
            .add(self.sigma.broadcast_rows(p)?.mul(tape.constant(eps.clone()))?)
    }

    /// `p` reparameterized draws as rows of a `[p, d]` node.
    pub fn sample(&self, rng: &mut impl Rng, p: usize) -> Result<Var<'t, S>> {
        if p == 0 {
            return Err(Error::Contract("need at least one posterior sample".into()));
        }
        self.sample_with(&standard_normal(rng, &[p, self.dim()]))
    }

    /// Closed-form `KL(q ‖ N(0, I))`.
    pub fn kl(&self) -> Result<Var<'t, S>> {
        let m2 = self.mean_total.square();
        let s2 = self.sigma.square();
        let log_s = self.sigma.ln().scale(S::lit(2.0));
        Ok(m2.add(s2)?.add_scalar(-S::one()).sub(log_s)?.sum().scale(S::lit(0.5)))
    }
}
