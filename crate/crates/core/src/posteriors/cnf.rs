use rand::Rng;
use serde::{Deserialize, Serialize};

use super::log_normal_rows;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{uniform_init, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the Jacobian trace of the dynamics is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// One forward-mode derivative per basis vector, batched.
    Exact,
    /// Closed form for the two-hidden-layer tanh network.
    Analytic,
    /// Single Rademacher probe per sample, fixed over the integration.
    Hutchinson,
}

fn default_flow_hidden() -> usize {
    64
}
fn default_steps() -> usize {
    32
}
fn default_t_prior() -> f64 {
    0.1
}
fn default_trace() -> TraceMode {
    TraceMode::Exact
}

/// Shape of the flow dynamics network and its integration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    #[serde(default = "default_flow_hidden")]
    pub hidden: usize,
    /// RK4 steps over `[0, 1]`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Variance of the base distribution `N(0, t·I)`.
    #[serde(default = "default_t_prior")]
    pub t_prior: f64,
    #[serde(default = "default_trace")]
    pub trace: TraceMode,
}

impl Default for FlowSpec {
    fn default() -> Self {
        FlowSpec {
            hidden: default_flow_hidden(),
            steps: default_steps(),
            t_prior: default_t_prior(),
            trace: default_trace(),
        }
    }
}

const HIDDEN: [&str; 2] = ["flow/layer0", "flow/layer1"];

impl FlowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.steps < 4 || !(self.t_prior > 0.0) {
            return Err(Error::Config(format!(
                "flow needs hidden > 0, steps >= 4 and t_prior > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Parameters η of the dynamics `g(z, t, C)` for `z ∈ R^dim`, `C ∈ R^c_dim`.
    pub fn init<S: Scalar>(&self, dim: usize, c_dim: usize, rng: &mut impl Rng) -> Result<ParamSet<S>> {
        let h = self.hidden;
        let mut p = ParamSet::new();
        for (name, fan) in HIDDEN.iter().zip([dim, h]) {
            p.insert(format!("{name}/weight"), uniform_init(rng, &[fan, h], fan))?;
            p.insert(format!("{name}/bias"), uniform_init(rng, &[h], fan))?;
            p.insert(format!("{name}/cond"), uniform_init(rng, &[c_dim, h], c_dim))?;
            p.insert(format!("{name}/time"), uniform_init(rng, &[h], 1))?;
        }
        // A small output layer keeps the initial flow close to the identity.
        let w: Tensor<S> = uniform_init(rng, &[h, dim], h);
        p.insert("flow/out/weight", w.map(|v| v * S::lit(0.1)))?;
        p.insert("flow/out/bias", Tensor::zeros([dim]))?;
        Ok(p)
    }
}

/// Time derivative of the flow state and the Jacobian trace per row.
pub trait Dynamics<'t, S: Scalar> {
    fn eval(&self, z: Var<'t, S>, t: S) -> Result<(Var<'t, S>, Var<'t, S>)>;
}

/// `dz = a·z`, trace `a·d`.
#[derive(Clone, Copy, Debug)]
pub struct LinearDynamics<S> {
    pub a: S,
}

impl<'t, S: Scalar> Dynamics<'t, S> for LinearDynamics<S> {
    fn eval(&self, z: Var<'t, S>, _t: S) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let (b, d) = z.value().dims2("LinearDynamics")?;
        let tr = z.tape().constant(Tensor::full([b], self.a * S::lit(d as f64)));
        Ok((z.scale(self.a), tr))
    }
}

struct Layer<'t, S> {
    weight: Var<'t, S>,
    cond: Var<'t, S>,
    time: Var<'t, S>,
}

/// Tanh MLP `g(z, t, C)` with `C·W_c + b + t·w_t` added to each hidden
/// pre-activation.
pub struct FlowNet<'t, S> {
    layers: [Layer<'t, S>; 2],
    out_w: Var<'t, S>,
    out_b: Var<'t, S>,
    mode: TraceMode,
    probe: Option<Tensor<S>>,
}

impl<'t, S: Scalar> FlowNet<'t, S> {
    /// `probe` (`[B, d]`, ±1 entries) is required in Hutchinson mode.
    pub fn new(eta: &Bound<'t, S>, c: Var<'t, S>, mode: TraceMode, probe: Option<Tensor<S>>) -> Result<Self> {
        let c_dim = c.value().len();
        let c_row = c.reshape([1, c_dim])?;
        let mut layers = Vec::with_capacity(2);
        for name in HIDDEN {
            let wc = eta.get(&format!("{name}/cond"))?;
            if wc.shape()[0] != c_dim {
                return Err(Error::dim("FlowNet", &wc.shape(), &[c_dim]));
            }
            let h = wc.shape()[1];
            let cond = c_row
                .matmul(wc)?
                .reshape([h])?
                .add(eta.get(&format!("{name}/bias"))?)?;
            layers.push(Layer {
                weight: eta.get(&format!("{name}/weight"))?,
                cond,
                time: eta.get(&format!("{name}/time"))?,
            });
        }
        if mode == TraceMode::Hutchinson && probe.is_none() {
            return Err(Error::Contract("Hutchinson trace needs a probe".into()));
        }
        let [l0, l1]: [Layer<'t, S>; 2] = layers.try_into().ok().expect("two layers");
        Ok(FlowNet {
            layers: [l0, l1],
            out_w: eta.get("flow/out/weight")?,
            out_b: eta.get("flow/out/bias")?,
            mode,
            probe,
        })
    }

    /// Returns `(output, [h1, h2])`.
    fn forward(&self, z: Var<'t, S>, t: S) -> Result<(Var<'t, S>, [Var<'t, S>; 2])> {
        let rows = z.shape()[0];
        let mut h = z;
        let mut hs = Vec::with_capacity(2);
        for l in &self.layers {
            let shift = l.cond.add(l.time.scale(t))?;
            h = h.matmul(l.weight)?.add(shift.broadcast_rows(rows)?)?.tanh();
            hs.push(h);
        }
        let out = h.matmul(self.out_w)?.add_row(self.out_b)?;
        Ok((out, [hs[0], hs[1]]))
    }
}

fn tiled_identity<S: Scalar>(b: usize, d: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); b * d * d];
    for blk in 0..b {
        for j in 0..d {
            data[(blk * d + j) * d + j] = S::one();
        }
    }
    Tensor::from_parts(vec![b * d, d], data)
}

impl<'t, S: Scalar> Dynamics<'t, S> for FlowNet<'t, S> {
    fn eval(&self, z: Var<'t, S>, t: S) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let tape = z.tape();
        let (b, d) = z.value().dims2("FlowNet")?;
        if self.out_w.shape()[1] != d {
            return Err(Error::dim("FlowNet", &[b, d], &self.out_w.shape()));
        }
        match self.mode {
            TraceMode::Analytic => {
                let (out, [h1, h2]) = self.forward(z, t)?;
                let d1 = h1.square().neg().add_scalar(S::one());
                let d2 = h2.square().neg().add_scalar(S::one());
                let q = self
                    .layers[1]
                    .weight
                    .mul(self.out_w.matmul(self.layers[0].weight)?.transpose()?)?;
                let tr = d1.matmul(q)?.mul(d2)?.sum_cols()?;
                Ok((out, tr))
            }
            TraceMode::Exact => {
                let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, d)).collect();
                let z_rep = z.gather_rows(&rep)?;
                let (out_rep, _) = self.forward(z_rep, t)?;
                let basis = tape.constant(tiled_identity(b, d));
                let jv = tape.jvp(out_rep, z_rep, basis)?;
                let tr = jv.mul(basis)?.sum_cols()?.reshape([b, d])?.sum_cols()?;
                let firsts: Vec<usize> = (0..b).map(|i| i * d).collect();
                Ok((out_rep.gather_rows(&firsts)?, tr))
            }
            TraceMode::Hutchinson => {
                let probe = self.probe.as_ref().expect("checked in new");
                if probe.shape() != [b, d] {
                    return Err(Error::dim("FlowNet probe", probe.shape(), &[b, d]));
                }
                let z_in = z.reshape([b, d])?;
                let (out, _) = self.forward(z_in, t)?;
                let v = tape.constant(probe.clone());
                let tr = tape.jvp(out, z_in, v)?.mul(v)?.sum_cols()?;
                Ok((out, tr))
            }
        }
    }
}

/// Flow output and accumulated `log |det J|` per row.
#[derive(Clone, Copy, Debug)]
pub struct FlowResult<'t, S> {
    pub output: Var<'t, S>,
    pub logdet: Var<'t, S>,
}

/// Fixed-step RK4 on the joint state `(z, ∫ trace dt)` from `t0` to `t1`.
pub fn integrate<'t, S: Scalar>(
    dynamics: &dyn Dynamics<'t, S>,
    z0: Var<'t, S>,
    t0: S,
    t1: S,
    steps: usize,
) -> Result<FlowResult<'t, S>> {
    if steps == 0 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    let (b, _) = z0.value().dims2("integrate")?;
    let h = (t1 - t0) / S::lit(steps as f64);
    let half = h * S::lit(0.5);
    let sixth = h / S::lit(6.0);
    let two = S::lit(2.0);
    let mut z = z0;
    let mut ld = z0.tape().constant(Tensor::zeros([b]));
    for step in 0..steps {
        let t = t0 + h * S::lit(step as f64);
        let (k1, l1) = dynamics.eval(z, t)?;
        let (k2, l2) = dynamics.eval(z.add(k1.scale(half))?, t + half)?;
        let (k3, l3) = dynamics.eval(z.add(k2.scale(half))?, t + half)?;
        let (k4, l4) = dynamics.eval(z.add(k3.scale(h))?, t + h)?;
        let dz = k1.add(k2.scale(two))?.add(k3.scale(two))?.add(k4)?;
        let dl = l1.add(l2.scale(two))?.add(l3.scale(two))?.add(l4)?;
        z = z.add(dz.scale(sixth))?;
        ld = ld.add(dl.scale(sixth))?;
        if !z.value().all_finite() || !ld.value().all_finite() {
            return Err(Error::Numerical {
                step,
                message: "non-finite flow state".into(),
            });
        }
    }
    Ok(FlowResult { output: z, logdet: ld })
}

/// Integrates the flow from `t = 0` to `t = 1`.
pub fn cnf_forward<'t, S: Scalar>(dynamics: &dyn Dynamics<'t, S>, z0: Var<'t, S>, steps: usize) -> Result<FlowResult<'t, S>> {
    integrate(dynamics, z0, S::zero(), S::one(), steps)
}

/// Integrates backwards from `t = 1` to `t = 0`; `logdet` is that of the
/// inverse map.
pub fn cnf_inverse<'t, S: Scalar>(dynamics: &dyn Dynamics<'t, S>, delta: Var<'t, S>, steps: usize) -> Result<FlowResult<'t, S>> {
    integrate(dynamics, delta, S::one(), S::zero(), steps)
}

/// Draws from a flow posterior with their Monte Carlo KL estimate.
#[derive(Clone, Copy, Debug)]
pub struct CnfSample<'t, S> {
    /// `θ′ = θ^H + Δθ′`, one row per draw.
    pub theta: Var<'t, S>,
    /// Mean over draws of `log q(Δθ′) − log N(θ′ | 0, I)`.
    pub kl: Var<'t, S>,
}

/// `z = √t_prior · eps` for each row of `eps: [p, d]`, pushed through the flow.
pub fn cnf_sample_and_kl<'t, S: Scalar>(
    theta_head: Var<'t, S>,
    dynamics: &dyn Dynamics<'t, S>,
    t_prior: S,
    steps: usize,
    eps: &Tensor<S>,
) -> Result<CnfSample<'t, S>> {
    let (p, d) = eps.dims2("cnf_sample_and_kl")?;
    if p == 0 {
        return Err(Error::Contract("need at least one posterior sample".into()));
    }
    if theta_head.shape() != [d] {
        return Err(Error::dim("cnf_sample_and_kl", &theta_head.shape(), &[p, d]));
    }
    let tape = theta_head.tape();
    let z = tape.constant(eps.map(|e| e * t_prior.sqrt()));
    let flow = cnf_forward(dynamics, z, steps)?;
    let theta = theta_head.broadcast_rows(p)?.add(flow.output)?;
    let log_q = log_normal_rows(z, t_prior)?.sub(flow.logdet)?;
    let log_p = log_normal_rows(theta, S::one())?;
    Ok(CnfSample {
        theta,
        kl: log_q.sub(log_p)?.mean(),
    })
}
