use rand::Rng;

use super::config::{MamlOrder, Method, RunConfig};
use crate::autodiff::{NormMode, Tape, Var};
use crate::episodes::TaskEpisode;
use crate::error::{Error, Result};
use crate::hypernet::{canonicalize, enhance, enhance_with, hyper_forward, support_predictions, HyperOutput};
use crate::nn::{cross_entropy, BatchStats, Bound, ParamSet};
use crate::posteriors::{cnf_sample_and_kl, rademacher, standard_normal, FlowNet, GaussianPosterior, TraceMode};
use crate::scalar::Scalar;
use crate::target::{bound_head_flat, head_logits, HeadWeights, UniversalWeights};
use crate::tensor::Tensor;

/// All trainable parameters of one run plus batchnorm running statistics.
///
/// Parameter names are grouped by prefix: `encoder/` and `head/` (θ),
/// `hyper/` (φ) and `flow/` (η).
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParamSet<f64>,
    pub running: ParamSet<f64>,
}

impl Model {
    pub fn init(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Self> {
        let n_way = cfg.train.n_way;
        let enc = &cfg.model.encoder;
        let theta = UniversalWeights::init(enc, n_way, rng)?;
        let mut params = theta.joined()?;
        if let Some(kind) = cfg.train.method.hyper_kind() {
            params.extend(&cfg.model.hyper.init(kind, enc.emb(), n_way, rng)?)?;
        }
        if cfg.train.method == Method::BhmamlCnf {
            let d = HeadWeights::<f64>::len_for(enc.emb(), n_way);
            params.extend(&cfg.model.flow.init(d, cfg.model.hyper.c_dim, rng)?)?;
        }
        Ok(Model {
            params,
            running: enc.init_running(),
        })
    }

    pub fn theta(&self) -> UniversalWeights<f64> {
        UniversalWeights::split(&self.params)
    }

    pub fn phi(&self) -> ParamSet<f64> {
        self.params.subset("hyper/")
    }

    pub fn eta(&self) -> ParamSet<f64> {
        self.params.subset("flow/")
    }

    /// Checks that the parameter groups present match the method.
    pub fn check_method(&self, method: Method) -> Result<()> {
        let has_phi = !self.phi().is_empty();
        let has_eta = !self.eta().is_empty();
        if has_phi != method.hyper_kind().is_some() || has_eta != (method == Method::BhmamlCnf) {
            return Err(Error::Config(format!(
                "parameters do not match method {} (hypernetwork: {has_phi}, flow: {has_eta})",
                method.as_str()
            )));
        }
        Ok(())
    }
}

/// Which labelled set carries the likelihood term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Query,
    Support,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub gamma: f64,
    pub mode: NormMode,
    pub target: Target,
    /// Multiplies the Gaussian posterior's σ (1 for the model as trained).
    pub sigma_scale: f64,
}

impl LossOptions {
    pub fn train(gamma: f64) -> Self {
        LossOptions {
            gamma,
            mode: NormMode::Train,
            target: Target::Query,
            sigma_scale: 1.0,
        }
    }

    pub fn eval() -> Self {
        LossOptions {
            gamma: 0.0,
            mode: NormMode::Eval,
            target: Target::Query,
            sigma_scale: 1.0,
        }
    }
}

/// Parameter-free randomness of one episode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<S> {
    /// Standard normal `[p, |θ^H|]` for the Bayesian variants.
    pub eps: Option<Tensor<S>>,
    /// Rademacher `[p, |θ^H|]` for Hutchinson traces.
    pub probe: Option<Tensor<S>>,
    /// Replaces the support-set predictions fed to the hypernetwork
    /// (canonical row order). They carry no gradient either way, so
    /// finite-difference checks hold them fixed here.
    pub support_predictions: Option<Tensor<S>>,
}

impl<S: Scalar> Noise<S> {
    pub fn none() -> Self {
        Noise {
            eps: None,
            probe: None,
            support_predictions: None,
        }
    }

    pub fn draw(cfg: &RunConfig, p: usize, rng: &mut impl Rng) -> Self {
        let d = HeadWeights::<S>::len_for(cfg.model.encoder.emb(), cfg.train.n_way);
        match cfg.train.method {
            Method::BhmamlG => Noise {
                eps: Some(standard_normal(rng, &[p, d])),
                ..Noise::none()
            },
            Method::BhmamlCnf => {
                let eps = standard_normal(rng, &[p, d]);
                let probe = (cfg.model.flow.trace == TraceMode::Hutchinson).then(|| rademacher(rng, &[p, d]));
                Noise {
                    eps: Some(eps),
                    probe,
                    support_predictions: None,
                }
            }
            Method::Maml | Method::Hypermaml => Noise::none(),
        }
    }

    /// Zero ε: every Gaussian draw equals the posterior mean.
    pub fn zeros(cfg: &RunConfig, p: usize) -> Self {
        let d = HeadWeights::<S>::len_for(cfg.model.encoder.emb(), cfg.train.n_way);
        Noise {
            eps: Some(Tensor::zeros([p, d])),
            ..Noise::none()
        }
    }
}

/// Everything one episode pass produces.
pub struct EpisodeOutput<'t, S> {
    /// Likelihood term plus `γ·KL`.
    pub loss: Var<'t, S>,
    /// Mean cross-entropy over posterior draws.
    pub ce: Var<'t, S>,
    pub kl: Option<Var<'t, S>>,
    /// Target-set logits `[B, N]`, one per posterior draw.
    pub logits: Vec<Var<'t, S>>,
    /// Labels of the target set, in row order of `logits`.
    pub labels: Vec<usize>,
    pub stats: Vec<BatchStats<S>>,
}

fn bound_subset<'t, S: Scalar>(names: &[String], vars: &[Var<'t, S>]) -> Bound<'t, S> {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// One episode through the configured method.
///
/// The support set drives adaptation (hypernetwork input or MAML inner
/// loop); the likelihood is scored on `opts.target`.
pub fn episode_forward<'t, S: Scalar>(
    cfg: &RunConfig,
    params: &Bound<'t, S>,
    running: &ParamSet<S>,
    episode: &TaskEpisode<S>,
    opts: &LossOptions,
    noise: &Noise<S>,
) -> Result<EpisodeOutput<'t, S>> {
    let ep = canonicalize(episode)?;
    let n_way = cfg.train.n_way;
    if ep.n_way != n_way {
        return Err(Error::Config(format!("episode is {}-way, model is {n_way}-way", ep.n_way)));
    }
    let enc = &cfg.model.encoder;
    let tape = params.get("head/weight")?.tape();
    let mut stats = Vec::new();
    let (e_s, st) = enc.encode(tape.constant(ep.support_x.clone()), params, opts.mode, running)?;
    stats.extend(st);
    let (target_x, labels) = match opts.target {
        Target::Query => (&ep.query_x, ep.query_y.clone()),
        Target::Support => (&ep.support_x, ep.support_y.clone()),
    };
    let encode_target = |p: &Bound<'t, S>, stats: &mut Vec<BatchStats<S>>| -> Result<Var<'t, S>> {
        if opts.target == Target::Support {
            return Ok(e_s);
        }
        let (e, st) = enc.encode(tape.constant(target_x.clone()), p, opts.mode, running)?;
        stats.extend(st);
        Ok(e)
    };
    let theta_h = bound_head_flat(params)?;

    let method = cfg.train.method;
    let (heads, kl, params_for_target): (Vec<Var<'t, S>>, Option<Var<'t, S>>, Bound<'t, S>) = match method {
        Method::Maml => {
            let (head, adapted) = maml_inner(cfg, params, running, &ep, opts.mode, e_s, theta_h)?;
            (vec![head], None, adapted)
        }
        _ => {
            let kind = method.hyper_kind().expect("hypernetwork method");
            let es = enhance_with(e_s, &ep.support_y, noise.support_predictions.as_ref(), theta_h, n_way)?;
            match hyper_forward(&es, params, kind)? {
                HyperOutput::Point { delta } => (vec![theta_h.add(delta)?], None, params.clone()),
                HyperOutput::Gaussian { mu, rho } => {
                    let mut q = GaussianPosterior::from_hyper(theta_h, mu, rho)?;
                    if opts.sigma_scale != 1.0 {
                        q.sigma = q.sigma.scale(S::lit(opts.sigma_scale));
                    }
                    let eps = noise
                        .eps
                        .as_ref()
                        .ok_or_else(|| Error::Contract("Gaussian posterior needs noise".into()))?;
                    let draws = q.sample_with(eps)?;
                    (rows(draws)?, Some(q.kl()?), params.clone())
                }
                HyperOutput::Cnf { c } => {
                    let eps = noise
                        .eps
                        .as_ref()
                        .ok_or_else(|| Error::Contract("flow posterior needs noise".into()))?;
                    let flow = &cfg.model.flow;
                    let net = FlowNet::new(params, c, flow.trace, noise.probe.clone())?;
                    let s = cnf_sample_and_kl(theta_h, &net, S::lit(flow.t_prior), flow.steps, eps)?;
                    (rows(s.theta)?, Some(s.kl), params.clone())
                }
            }
        }
    };

    let e_t = encode_target(&params_for_target, &mut stats)?;
    let mut logits = Vec::with_capacity(heads.len());
    let mut ce_sum: Option<Var<'t, S>> = None;
    for h in &heads {
        let l = head_logits(e_t, *h, n_way)?;
        let ce = cross_entropy(l, &labels)?;
        ce_sum = Some(match ce_sum {
            None => ce,
            Some(acc) => acc.add(ce)?,
        });
        logits.push(l);
    }
    let ce = ce_sum.expect("at least one draw").scale(S::one() / S::lit(heads.len() as f64));
    let loss = match kl {
        Some(k) if opts.gamma > 0.0 => ce.add(k.scale(S::lit(opts.gamma)))?,
        _ => ce,
    };
    Ok(EpisodeOutput {
        loss,
        ce,
        kl,
        logits,
        labels,
        stats,
    })
}

fn rows<'t, S: Scalar>(m: Var<'t, S>) -> Result<Vec<Var<'t, S>>> {
    let (p, d) = m.value().dims2("posterior draws")?;
    (0..p).map(|i| m.gather_rows(&[i])?.reshape([d])).collect()
}

/// `steps` plain gradient-descent steps `w ← w − α∇L(w)` on every variable
/// of `init`. First order treats each gradient as a constant; second order
/// keeps it on the tape so the result is differentiable in `init`.
pub fn gradient_steps<'t, S: Scalar>(
    init: &[Var<'t, S>],
    alpha: S,
    steps: usize,
    order: MamlOrder,
    mut loss: impl FnMut(&[Var<'t, S>]) -> Result<Var<'t, S>>,
) -> Result<Vec<Var<'t, S>>> {
    let mut w = init.to_vec();
    let Some(first) = init.first() else {
        return Ok(w);
    };
    let tape = first.tape();
    for _ in 0..steps {
        let l = loss(&w)?;
        let grads: Vec<Var<'t, S>> = match order {
            MamlOrder::First => tape.grad(l, &w)?.into_iter().map(|g| tape.constant(g)).collect(),
            MamlOrder::Second => tape.grad_graph(l, &w)?,
        };
        w = w
            .iter()
            .zip(&grads)
            .map(|(v, g)| v.sub(g.scale(alpha)))
            .collect::<Result<_>>()?;
    }
    Ok(w)
}

/// Gradient-descent adaptation on the support cross-entropy. Returns the
/// adapted flat head and the parameter binding to encode the target set
/// with (adapted encoder when all weights are adapted).
fn maml_inner<'t, S: Scalar>(
    cfg: &RunConfig,
    params: &Bound<'t, S>,
    running: &ParamSet<S>,
    ep: &TaskEpisode<S>,
    mode: NormMode,
    e_s: Var<'t, S>,
    theta_h: Var<'t, S>,
) -> Result<(Var<'t, S>, Bound<'t, S>)> {
    let t = &cfg.train;
    let tape = theta_h.tape();
    let n_way = t.n_way;
    let enc_names: Vec<String> = if t.maml_adapt_all {
        params.subset("encoder/").names().map(String::from).collect()
    } else {
        Vec::new()
    };
    let mut init = vec![theta_h];
    for n in &enc_names {
        init.push(params.get(n)?);
    }
    let adapted = gradient_steps(&init, S::lit(t.inner_lr), t.inner_steps, t.maml_order, |w| {
        let e = if t.maml_adapt_all {
            let b = params.merged(&bound_subset(&enc_names, &w[1..]));
            cfg.model.encoder.encode(tape.constant(ep.support_x.clone()), &b, mode, running)?.0
        } else {
            e_s
        };
        cross_entropy(head_logits(e, w[0], n_way)?, &ep.support_y)
    })?;
    Ok((adapted[0], params.merged(&bound_subset(&enc_names, &adapted[1..]))))
}

/// Loss, gradients for every parameter and batch statistics of one
/// training episode.
pub fn task_gradients(
    cfg: &RunConfig,
    model: &Model,
    episode: &TaskEpisode<f64>,
    opts: &LossOptions,
    noise: &Noise<f64>,
) -> Result<(f64, ParamSet<f64>, Vec<BatchStats<f64>>)> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let out = episode_forward(cfg, &bound, &model.running, episode, opts, noise)?;
    let loss = out.loss.item();
    let grads = bound.gradients(out.loss)?;
    Ok((loss, grads, out.stats))
}

/// Binds parameters for a forward-only pass. MAML still needs tracked
/// leaves for its inner-loop gradients.
pub fn bind_for_inference<'t>(cfg: &RunConfig, model: &Model, tape: &'t Tape<f64>) -> Bound<'t, f64> {
    if cfg.train.method == Method::Maml {
        model.params.bind(tape)
    } else {
        model.params.bind_const(tape)
    }
}

/// Scalar episode objective for the given parameters.
pub fn episode_loss(
    cfg: &RunConfig,
    model: &Model,
    episode: &TaskEpisode<f64>,
    opts: &LossOptions,
    noise: &Noise<f64>,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = bind_for_inference(cfg, model, &tape);
    Ok(episode_forward(cfg, &bound, &model.running, episode, opts, noise)?.loss.item())
}

/// Point-wise head update `θ^H + H_φ(S)` of a HyperMAML model.
pub fn hypermaml_update(cfg: &RunConfig, model: &Model, episode: &TaskEpisode<f64>, mode: NormMode) -> Result<HeadWeights<f64>> {
    if cfg.train.method != Method::Hypermaml {
        return Err(Error::Config("hypermaml_update needs a hypermaml model".into()));
    }
    let tape = Tape::new();
    let bound = model.params.bind_const(&tape);
    let ep = canonicalize(episode)?;
    let (e_s, _) = cfg
        .model
        .encoder
        .encode(tape.constant(ep.support_x.clone()), &bound, mode, &model.running)?;
    let theta_h = bound_head_flat(&bound)?;
    let es = enhance(e_s, &ep.support_y, theta_h, cfg.train.n_way)?;
    let HyperOutput::Point { delta } = hyper_forward(&es, &bound, crate::hypernet::HyperKind::Point)? else {
        unreachable!("point kind requested")
    };
    Ok(HeadWeights {
        emb: cfg.model.encoder.emb(),
        n_way: cfg.train.n_way,
        flat: theta_h.add(delta)?.value().to_vec(),
    })
}

/// Per-draw class probabilities `[p][B·N]` for the target set.
pub fn predictive_probs(
    cfg: &RunConfig,
    model: &Model,
    episode: &TaskEpisode<f64>,
    opts: &LossOptions,
    noise: &Noise<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let tape = Tape::new();
    let bound = bind_for_inference(cfg, model, &tape);
    let out = episode_forward(cfg, &bound, &model.running, episode, opts, noise)?;
    out.logits.iter().map(|l| Ok(l.softmax()?.value())).collect()
}

/// Gaussian-posterior model whose mean update reproduces a point-wise
/// hypernetwork model exactly, with every pre-offset ρ output equal to
/// `rho`. A very negative `rho` pins σ at its floor.
pub fn gaussian_from_point(model: &Model, rho: f64) -> Result<Model> {
    let w = model.params.get("hyper/layer2/weight")?;
    let b = model.params.get("hyper/layer2/bias")?;
    let (h, o) = w.dims2("gaussian_from_point")?;
    let mut wd = Vec::with_capacity(h * 2 * o);
    for row in w.data().chunks_exact(o) {
        wd.extend_from_slice(row);
        wd.extend(std::iter::repeat_n(0.0, o));
    }
    let mut bd = b.to_vec();
    bd.extend(std::iter::repeat_n(rho, o));
    let mut params = ParamSet::new();
    for (n, t) in model.params.iter() {
        let t = match n {
            "hyper/layer2/weight" => Tensor::new([h, 2 * o], wd.clone())?,
            "hyper/layer2/bias" => Tensor::new([2 * o], bd.clone())?,
            _ => t.clone(),
        };
        params.insert(n, t)?;
    }
    Ok(Model {
        params,
        running: model.running.clone(),
    })
}

/// Support-set predictions of the universal head that the hypernetwork
/// sees for `episode`, in canonical row order.
pub fn frozen_support_predictions(cfg: &RunConfig, model: &Model, episode: &TaskEpisode<f64>, mode: NormMode) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let bound = model.params.bind_const(&tape);
    let ep = canonicalize(episode)?;
    let (e_s, _) = cfg
        .model
        .encoder
        .encode(tape.constant(ep.support_x.clone()), &bound, mode, &model.running)?;
    support_predictions(e_s, bound_head_flat(&bound)?, cfg.train.n_way)
}
