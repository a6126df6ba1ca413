//! Finite-difference audit of every differentiable building block and of
//! the full episode objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, max_relative_error, NormMode, Tape, Var};
use crate::episodes::{sample_episode, SyntheticSpec, Split, TaskEpisode};
use crate::error::Result;
use crate::hypernet::{enhance_with, hyper_forward, support_predictions, HyperKind, HyperOutput, HyperSpec};
use crate::meta::{
    episode_loss, frozen_support_predictions, task_gradients, DataSource, LossOptions, MamlOrder, Method, Model,
    ModelConfig, Noise, RunConfig, TrainConfig,
};
use crate::nn::{conv_block, cross_entropy, global_avg_pool, linear, Bound, ConvBlock, EncoderSpec, ParamSet};
use crate::posteriors::{cnf_sample_and_kl, standard_normal, FlowNet, FlowSpec, GaussianPosterior, TraceMode};
use crate::target::{head_logits, HeadWeights};
use crate::tensor::Tensor;

/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Relative error between the episode-loss gradient and central
/// differences over every parameter coordinate. Support predictions fed to
/// the hypernetwork are held at their base value since they carry no
/// gradient.
pub fn episode_grad_check(
    cfg: &RunConfig,
    model: &Model,
    episode: &TaskEpisode<f64>,
    opts: &LossOptions,
    noise: &Noise<f64>,
    eps: f64,
) -> Result<f64> {
    let mut noise = noise.clone();
    if cfg.train.method != Method::Maml {
        noise.support_predictions = Some(frozen_support_predictions(cfg, model, episode, opts.mode)?);
    }
    let (_, grads, _) = task_gradients(cfg, model, episode, opts, &noise)?;
    let flat = model.params.flatten();
    let mut numeric = Vec::with_capacity(flat.len());
    let at = |p: &[f64]| -> Result<f64> {
        let m = Model {
            params: model.params.unflatten(p)?,
            running: model.running.clone(),
        };
        episode_loss(cfg, &m, episode, opts, &noise)
    };
    let mut p = flat.clone();
    for i in 0..flat.len() {
        p[i] = flat[i] + eps;
        let up = at(&p)?;
        p[i] = flat[i] - eps;
        let down = at(&p)?;
        p[i] = flat[i];
        numeric.push((up - down) / (2.0 * eps));
    }
    Ok(max_relative_error(&grads.flatten(), &numeric))
}

fn check_set<F>(set: &ParamSet<f64>, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let names: Vec<String> = set.names().map(String::from).collect();
    let values: Vec<Tensor<f64>> = set.iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |tape, vars| f(tape, &Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))),
        &values,
        EPS,
    )
}

fn wave(shape: &[usize], phase: f64, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * phase).sin() * scale).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches")
}

/// Small configuration used for the episode-level checks.
pub fn toy_config(method: Method) -> RunConfig {
    RunConfig {
        train: TrainConfig {
            method,
            n_way: 3,
            k_shot: 2,
            n_query: 2,
            p_samples: 2,
            inner_steps: 2,
            inner_lr: 0.1,
            maml_order: MamlOrder::Second,
            maml_adapt_all: true,
            ..TrainConfig::default()
        },
        model: ModelConfig {
            encoder: EncoderSpec::Mlp {
                input_dim: 5,
                hidden: 6,
                emb: 4,
            },
            hyper: HyperSpec {
                hidden: 8,
                c_dim: 3,
                zero_init_final: false,
            },
            flow: FlowSpec {
                hidden: 6,
                steps: 4,
                t_prior: 0.1,
                trace: TraceMode::Exact,
            },
        },
        data: DataSource::Synthetic(SyntheticSpec::blobs(8, 5, 6, 0.3, 11)),
    }
}

fn episode_case(method: Method, gamma: f64) -> Result<f64> {
    let cfg = toy_config(method);
    let data = cfg.data.load()?;
    // Seed chosen so that no ReLU pre-activation lies within a
    // finite-difference step of its kink.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let model = Model::init(&cfg, &mut rng)?;
    let ep = sample_episode(&data, Split::Train, 3, 2, 2, &mut rng)?;
    let noise = Noise::draw(&cfg, cfg.train.p_samples, &mut rng);
    episode_grad_check(&cfg, &model, &ep, &LossOptions::train(gamma), &noise, EPS)
}

/// Runs every check; each result must stay below [`TOLERANCE`].
pub fn suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut push = |name, r: Result<f64>| -> Result<()> {
        out.push(CheckResult {
            name,
            max_rel_error: r?,
        });
        Ok(())
    };

    push(
        "pointwise ops",
        grad_check(
            |_, p| {
                let x = p[0];
                let a = x.tanh().add(x.sigmoid())?.add(x.softplus())?;
                let b = x.square().add_scalar(1.0).sqrt().ln().add(x.scale(0.3).exp())?;
                Ok(a.mul(b)?.add(x.relu().square())?.sum())
            },
            &[wave(&[2, 5], 0.7, 1.3)],
            EPS,
        ),
    )?;
    push(
        "linear + cross-entropy",
        grad_check(
            |_, p| cross_entropy(linear(p[0], p[1], p[2])?, &[0, 2, 1]),
            &[wave(&[3, 4], 0.9, 1.0), wave(&[4, 3], 0.4, 0.8), wave(&[3], 1.1, 0.2)],
            EPS,
        ),
    )?;
    for (name, mode) in [("conv block (train)", NormMode::Train), ("conv block (eval)", NormMode::Eval)] {
        let (rm, rv) = (vec![0.1, -0.2], vec![0.8, 1.3]);
        push(
            name,
            grad_check(
                |tape, p| {
                    let blk = ConvBlock {
                        weight: p[1],
                        bias: p[2],
                        gamma: p[3],
                        beta: p[4],
                    };
                    let running = (mode == NormMode::Eval).then_some((&rm[..], &rv[..]));
                    let (y, _) = conv_block(p[0], &blk, mode, running, true)?;
                    let target = tape.constant(Tensor::full([3, 2], 0.3));
                    Ok(global_avg_pool(y)?.sub(target)?.square().sum())
                },
                &[
                    wave(&[3, 2, 4, 4], 0.53, 1.0),
                    wave(&[2, 2, 3, 3], 0.29, 0.5),
                    wave(&[2], 1.7, 0.1),
                    Tensor::vector(vec![1.2, 0.9]),
                    Tensor::vector(vec![0.05, 0.2]),
                ],
                EPS,
            ),
        )?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, spec, batch) in [
        (
            "mlp encoder",
            EncoderSpec::Mlp {
                input_dim: 5,
                hidden: 7,
                emb: 4,
            },
            4,
        ),
        (
            "conv-4 encoder",
            EncoderSpec::Conv4 {
                channels: 1,
                height: 8,
                width: 8,
                filters: 3,
            },
            3,
        ),
    ] {
        let params = spec.init::<f64>(&mut rng)?;
        let x = wave(&[batch, spec.input_len()], 0.37, 1.0);
        let running = spec.init_running::<f64>();
        let labels: Vec<usize> = (0..batch).map(|i| i % spec.emb()).collect();
        push(
            name,
            check_set(&params, |tape, b| {
                let (e, _) = spec.encode(tape.constant(x.clone()), b, NormMode::Train, &running)?;
                cross_entropy(e, &labels)
            }),
        )?;
    }

    let (emb, n_way) = (4, 3);
    let d = HeadWeights::<f64>::len_for(emb, n_way);
    let labels = vec![0, 0, 1, 1, 2, 2];
    let support = wave(&[6, emb], 0.61, 1.0);
    let head = wave(&[d], 0.83, 0.5);
    // The prediction block carries no gradient; hold it at its base value.
    let predictions = {
        let tape = Tape::new();
        support_predictions(tape.constant(support.clone()), tape.constant(head.clone()), n_way)?
    };
    for (name, kind) in [
        ("hypernetwork (point)", HyperKind::Point),
        ("hypernetwork (gaussian)", HyperKind::Gaussian),
        ("hypernetwork (flow condition)", HyperKind::Cnf),
    ] {
        let spec = HyperSpec {
            hidden: 6,
            c_dim: 3,
            zero_init_final: false,
        };
        let mut params = spec.init::<f64>(kind, emb, n_way, &mut rng)?;
        params.insert("support", support.clone())?;
        push(
            name,
            check_set(&params, |tape, b| {
                let es = enhance_with(
                    b.get("support")?,
                    &labels,
                    Some(&predictions),
                    tape.constant(head.clone()),
                    n_way,
                )?;
                Ok(match hyper_forward(&es, b, kind)? {
                    HyperOutput::Point { delta } => delta.tanh().sum(),
                    HyperOutput::Gaussian { mu, rho } => mu.tanh().add(rho.softplus())?.sum(),
                    HyperOutput::Cnf { c } => c.tanh().sum(),
                })
            }),
        )?;
    }

    let eps = standard_normal::<f64>(&mut rng, &[3, d]);
    let emb_t = wave(&[4, emb], 0.44, 1.0);
    let mut g = ParamSet::new();
    g.insert("head", wave(&[d], 0.83, 0.5))?;
    g.insert("mu", wave(&[d], 0.27, 0.3))?;
    g.insert("rho", wave(&[d], 0.19, 1.0))?;
    push(
        "gaussian posterior sample + kl",
        check_set(&g, |tape, b| {
            let q = GaussianPosterior::from_hyper(b.get("head")?, b.get("mu")?, b.get("rho")?)?;
            let draws = q.sample_with(&eps)?;
            let e = tape.constant(emb_t.clone());
            let mut loss = q.kl()?.scale(0.1);
            for i in 0..3 {
                let h = draws.gather_rows(&[i])?.reshape([d])?;
                loss = loss.add(cross_entropy(head_logits(e, h, n_way)?, &[0, 1, 2, 1])?)?;
            }
            Ok(loss)
        }),
    )?;

    for (name, trace) in [
        ("flow posterior sample + kl (exact trace)", TraceMode::Exact),
        ("flow posterior sample + kl (analytic trace)", TraceMode::Analytic),
    ] {
        let flow = FlowSpec {
            hidden: 5,
            steps: 4,
            t_prior: 0.1,
            trace,
        };
        let mut p = flow.init::<f64>(d, 3, &mut rng)?;
        p.insert("head", wave(&[d], 0.83, 0.5))?;
        p.insert("c", wave(&[3], 0.71, 0.8))?;
        let eps = &eps;
        let emb_t = &emb_t;
        push(
            name,
            check_set(&p, move |tape, b| {
                let net = FlowNet::new(b, b.get("c")?, flow.trace, None)?;
                let s = cnf_sample_and_kl(b.get("head")?, &net, 0.1, flow.steps, eps)?;
                let e = tape.constant(emb_t.clone());
                let mut loss = s.kl.scale(0.1);
                for i in 0..3 {
                    let h = s.theta.gather_rows(&[i])?.reshape([d])?;
                    loss = loss.add(cross_entropy(head_logits(e, h, n_way)?, &[0, 1, 2, 1])?)?;
                }
                Ok(loss)
            }),
        )?;
    }

    push("episode loss (bhmaml_g)", episode_case(Method::BhmamlG, 0.5))?;
    push("episode loss (bhmaml_cnf)", episode_case(Method::BhmamlCnf, 0.5))?;
    push("episode loss (hypermaml)", episode_case(Method::Hypermaml, 0.0))?;
    push("episode loss (maml, second order)", episode_case(Method::Maml, 0.0))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = suite().unwrap();
        assert!(results.len() >= 14);
        for r in &results {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }
}
