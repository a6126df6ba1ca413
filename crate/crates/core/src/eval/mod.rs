//! Episode evaluation, predictive uncertainty and test-time adaptation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormMode, Tape};
use crate::episodes::{sample_episode, Dataset, Split, TaskEpisode};
use crate::error::{Error, Result};
use crate::meta::{
    bind_for_inference, episode_forward, Adam, LossOptions, Method, Model, Noise, RunConfig, Target,
};
use crate::nn::ParamSet;
use crate::parallel::map_indexed;
use crate::tensor::Tensor;

/// Test-time adaptation of the hypernetwork (and flow) on the support set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptOptions {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub n_episodes: usize,
    /// Posterior draws per episode.
    pub p_eval: usize,
    pub seed: u64,
    pub adapt: Option<AdaptOptions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub n_episodes: usize,
    pub accuracy_mean: f64,
    /// 1.96 standard errors of the per-episode accuracies.
    pub ci95: f64,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    fn from_records(split: Split, episodes: Vec<EpisodeRecord>) -> Self {
        let n = episodes.len() as f64;
        let mean = episodes.iter().map(|e| e.accuracy).sum::<f64>() / n;
        let var = if episodes.len() > 1 {
            episodes.iter().map(|e| (e.accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EvalReport {
            split,
            n_episodes: episodes.len(),
            accuracy_mean: mean,
            ci95: 1.96 * (var / n).sqrt(),
            episodes,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,accuracy\n");
        for e in &self.episodes {
            out.push_str(&format!("{},{}\n", e.episode, e.accuracy));
        }
        out
    }
}

/// Generator of the `index`-th evaluation episode.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Mean of per-draw probability matrices.
pub fn mean_probs(draws: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = draws
        .first()
        .ok_or_else(|| Error::Contract("need at least one draw".into()))?;
    for d in draws {
        if d.shape() != first.shape() {
            return Err(Error::dim("mean_probs", first.shape(), d.shape()));
        }
    }
    // Identical draws (point-wise methods) average to themselves exactly.
    if draws.iter().all(|d| d.data() == first.data()) {
        return Ok(first.clone());
    }
    let mut acc = vec![0.0; first.len()];
    for d in draws {
        for (a, v) in acc.iter_mut().zip(d.data()) {
            *a += v;
        }
    }
    let n = draws.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|a| a / n).collect())
}

/// Fraction of rows whose argmax matches the label. Ties go to the
/// lowest class index.
pub fn accuracy(probs: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let (b, n) = probs.dims2("accuracy")?;
    if b != labels.len() {
        return Err(Error::dim("accuracy", &[b], &[labels.len()]));
    }
    let correct = probs
        .data()
        .chunks_exact(n)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / b as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predictive class probabilities of the target set, one matrix `[B, N]`
/// per posterior draw, together with the target labels.
pub fn predict(
    cfg: &RunConfig,
    model: &Model,
    episode: &TaskEpisode<f64>,
    opts: &LossOptions,
    noise: &Noise<f64>,
) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>, Vec<usize>)> {
    let tape = Tape::new();
    let bound = bind_for_inference(cfg, model, &tape);
    let out = episode_forward(cfg, &bound, &model.running, episode, opts, noise)?;
    let logits = out.logits.iter().map(|l| l.value()).collect();
    let probs = out
        .logits
        .iter()
        .map(|l| Ok(l.softmax()?.value()))
        .collect::<Result<_>>()?;
    Ok((logits, probs, out.labels))
}

/// Accuracy over `n_episodes` episodes of `opts.split`. Episode `i` uses
/// its own generator stream, so the report depends only on the model, the
/// data and `opts`.
pub fn evaluate(cfg: &RunConfig, model: &Model, dataset: &Dataset<f64>, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.n_episodes == 0 || opts.p_eval == 0 {
        return Err(Error::Config("evaluation needs at least one episode and one draw".into()));
    }
    cfg.check_dataset(dataset)?;
    model.check_method(cfg.train.method)?;
    let t = &cfg.train;
    let records = map_indexed(opts.n_episodes, |i| {
        let mut rng = episode_rng(opts.seed, i);
        let ep = sample_episode(dataset, opts.split, t.n_way, t.k_shot, t.n_query, &mut rng)?;
        let noise = Noise::draw(cfg, opts.p_eval, &mut rng);
        let adapted;
        let m = match opts.adapt {
            Some(a) => {
                adapted = adapt(cfg, model, &ep, a, &noise)?;
                &adapted
            }
            None => model,
        };
        let (_, probs, labels) = predict(cfg, m, &ep, &LossOptions::eval(), &noise)?;
        Ok(EpisodeRecord {
            episode: i,
            accuracy: accuracy(&mean_probs(&probs)?, &labels)?,
        })
    })?;
    Ok(EvalReport::from_records(opts.split, records))
}

/// Names of the parameters tuned by [`adapt`].
fn adapted_names(model: &Model) -> Vec<String> {
    model
        .params
        .names()
        .filter(|n| n.starts_with("hyper/") || n.starts_with("flow/"))
        .map(String::from)
        .collect()
}

/// Support-set objective at γ = γ_max with frozen noise, and its gradient
/// with respect to the hypernetwork (and flow) parameters only.
pub fn support_objective(
    cfg: &RunConfig,
    model: &Model,
    episode: &TaskEpisode<f64>,
    noise: &Noise<f64>,
) -> Result<(f64, ParamSet<f64>)> {
    let names = adapted_names(model);
    let mut frozen = ParamSet::new();
    let mut tuned = ParamSet::new();
    for (n, t) in model.params.iter() {
        if names.iter().any(|m| m == n) {
            tuned.insert(n, t.clone())?;
        } else {
            frozen.insert(n, t.clone())?;
        }
    }
    let tape = Tape::new();
    let tuned_b = tuned.bind(&tape);
    let bound = frozen.bind_const(&tape).merged(&tuned_b);
    let opts = LossOptions {
        gamma: cfg.train.gamma_max,
        mode: NormMode::Eval,
        target: Target::Support,
        sigma_scale: 1.0,
    };
    let out = episode_forward(cfg, &bound, &model.running, episode, &opts, noise)?;
    let loss = out.loss.item();
    Ok((loss, tuned_b.gradients(out.loss)?))
}

/// Copy of `model` whose hypernetwork (and flow) were tuned for `steps`
/// Adam steps on the episode's support set. The universal weights θ and
/// batchnorm statistics are untouched.
pub fn adapt(
    cfg: &RunConfig,
    model: &Model,
    episode: &TaskEpisode<f64>,
    opts: AdaptOptions,
    noise: &Noise<f64>,
) -> Result<Model> {
    if cfg.train.method == Method::Maml {
        return Err(Error::Unsupported("adaptation needs a hypernetwork method".into()));
    }
    if opts.steps == 0 {
        return Err(Error::Config("adaptation needs at least one step".into()));
    }
    let mut out = model.clone();
    let names = adapted_names(model);
    let mut tuned = ParamSet::new();
    for n in &names {
        tuned.insert(n.as_str(), model.params.get(n)?.clone())?;
    }
    let mut adam = Adam::new(&tuned);
    for step in 0..opts.steps {
        let (loss, grads) = support_objective(cfg, &out, episode, noise)?;
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step,
                message: format!("non-finite support loss {loss} during adaptation"),
            });
        }
        adam.step(&mut tuned, &grads, opts.lr)?;
        out.params.update_from(&tuned)?;
    }
    Ok(out)
}

/// `s` posterior draws of the query-set predictions of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    /// `[B, N]` per draw.
    pub logits: Vec<Tensor<f64>>,
    pub probs: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
}

impl SampleMatrix {
    /// CSV rows `split,sample,input_id,label,logit_0..,prob_0..`, without
    /// the header line (see [`SampleMatrix::csv_header`]).
    pub fn csv_rows(&self, split: &str) -> String {
        let mut out = String::new();
        for (s, (l, p)) in self.logits.iter().zip(&self.probs).enumerate() {
            let n = l.shape()[1];
            for (i, label) in self.labels.iter().enumerate() {
                out.push_str(&format!("{split},{s},{i},{label}"));
                for v in &l.data()[i * n..(i + 1) * n] {
                    out.push_str(&format!(",{v}"));
                }
                for v in &p.data()[i * n..(i + 1) * n] {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn csv_header(n_way: usize) -> String {
        let mut h = String::from("split,sample,input_id,label");
        for k in 0..n_way {
            h.push_str(&format!(",logit_{k}"));
        }
        for k in 0..n_way {
            h.push_str(&format!(",prob_{k}"));
        }
        h.push('\n');
        h
    }
}

/// Draws `s` independent posterior weights and records the query
/// predictions of each. `sigma_scale` multiplies the Gaussian posterior's
/// standard deviation. Draws are processed in chunks to bound memory.
pub fn predictive_samples(
    cfg: &RunConfig,
    model: &Model,
    episode: &TaskEpisode<f64>,
    s: usize,
    sigma_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampleMatrix> {
    const CHUNK: usize = 100;
    if s < 2 {
        return Err(Error::Config("predictive sampling needs at least two draws".into()));
    }
    let opts = LossOptions {
        sigma_scale,
        ..LossOptions::eval()
    };
    let mut out = SampleMatrix {
        logits: Vec::with_capacity(s),
        probs: Vec::with_capacity(s),
        labels: Vec::new(),
    };
    let mut done = 0;
    while done < s {
        let p = CHUNK.min(s - done);
        let noise = Noise::draw(cfg, p, rng);
        let (mut logits, mut probs, labels) = predict(cfg, model, episode, &opts, &noise)?;
        // Point-wise methods yield one prediction per pass.
        while logits.len() < p {
            logits.push(logits[0].clone());
            probs.push(probs[0].clone());
        }
        out.logits.append(&mut logits);
        out.probs.append(&mut probs);
        out.labels = labels;
        done += p;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputUncertainty {
    pub pred_entropy: f64,
    pub exp_entropy: f64,
    /// Mutual information between label and weights (BALD).
    pub mi: f64,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Entropy decomposition per input row from sampled probabilities.
pub fn uncertainty_metrics(probs: &[Tensor<f64>]) -> Result<Vec<InputUncertainty>> {
    if probs.len() < 2 {
        return Err(Error::Config("uncertainty needs at least two draws".into()));
    }
    let mean = mean_probs(probs)?;
    let (b, n) = mean.dims2("uncertainty_metrics")?;
    let s = probs.len() as f64;
    let identical = probs.iter().all(|p| p.data() == probs[0].data());
    Ok((0..b)
        .map(|i| {
            let pred = entropy(&mean.data()[i * n..(i + 1) * n]);
            let exp = if identical {
                pred
            } else {
                probs.iter().map(|p| entropy(&p.data()[i * n..(i + 1) * n])).sum::<f64>() / s
            };
            InputUncertainty {
                pred_entropy: pred,
                exp_entropy: exp,
                mi: pred - exp,
            }
        })
        .collect())
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    // C(n, k) / 2^n built up in log space.
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_c = 0.0;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            total += (ln_c + ln_half_n).exp();
        }
    }
    total.min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodEpisode {
    pub episode: usize,
    pub in_entropy: f64,
    pub ood_entropy: f64,
    pub in_mi: f64,
    pub ood_mi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub episodes: Vec<OodEpisode>,
    /// Episodes where the out-of-distribution entropy is strictly higher.
    pub wins: usize,
    /// Episodes without a tie.
    pub trials: usize,
    pub p_value: f64,
    /// Per-input metrics of every episode, in-distribution rows first.
    pub inputs: Vec<(usize, bool, InputUncertainty)>,
}

impl OodReport {
    pub fn mean_in_entropy(&self) -> f64 {
        self.episodes.iter().map(|e| e.in_entropy).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn mean_ood_entropy(&self) -> f64 {
        self.episodes.iter().map(|e| e.ood_entropy).sum::<f64>() / self.episodes.len() as f64
    }

    /// `input_id,split,pred_entropy,exp_entropy,mi`; split is `id` or `ood`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("input_id,split,pred_entropy,exp_entropy,mi\n");
        for (i, (_, ood, u)) in self.inputs.iter().enumerate() {
            let split = if *ood { "ood" } else { "id" };
            out.push_str(&format!("{i},{split},{},{},{}\n", u.pred_entropy, u.exp_entropy, u.mi));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodOptions {
    pub split: Split,
    pub n_episodes: usize,
    /// Posterior draws per episode.
    pub samples: usize,
    pub seed: u64,
}

fn mean_of(u: &[InputUncertainty], f: impl Fn(&InputUncertainty) -> f64) -> f64 {
    u.iter().map(f).sum::<f64>() / u.len() as f64
}

fn ood_pool(cfg: &RunConfig, dataset: &Dataset<f64>, ood: &Dataset<f64>) -> Result<Vec<(usize, usize)>> {
    cfg.check_dataset(dataset)?;
    cfg.check_dataset(ood)?;
    let t = &cfg.train;
    let pool: Vec<(usize, usize)> = Split::ALL.iter().flat_map(|&s| ood.split_examples(s)).collect();
    let n_q = t.n_way * t.n_query;
    if pool.len() < n_q {
        return Err(Error::Capacity(format!(
            "out-of-distribution set has {} examples, episodes need {n_q}",
            pool.len()
        )));
    }
    Ok(pool)
}

fn ood_pair(
    cfg: &RunConfig,
    model: &Model,
    dataset: &Dataset<f64>,
    ood: &Dataset<f64>,
    pool: &[(usize, usize)],
    opts: &OodOptions,
    index: usize,
) -> Result<(SampleMatrix, SampleMatrix)> {
    let t = &cfg.train;
    let mut rng = episode_rng(opts.seed, index);
    let ep = sample_episode(dataset, opts.split, t.n_way, t.k_shot, t.n_query, &mut rng)?;
    let picks = rand::seq::index::sample(&mut rng, pool.len(), t.n_way * t.n_query);
    let refs: Vec<(usize, usize)> = picks.iter().map(|j| pool[j]).collect();
    let ood_ep = ep.with_query(ood.gather(&refs));
    let draw_seed = rand::Rng::random::<u64>(&mut rng);
    let mut r1 = ChaCha8Rng::seed_from_u64(draw_seed);
    let mut r2 = ChaCha8Rng::seed_from_u64(draw_seed);
    Ok((
        predictive_samples(cfg, model, &ep, opts.samples, 1.0, &mut r1)?,
        predictive_samples(cfg, model, &ood_ep, opts.samples, 1.0, &mut r2)?,
    ))
}

/// Raw draws behind episode `index` of [`ood_experiment`]: in-distribution
/// queries, then out-of-distribution queries. Out-of-distribution labels
/// are meaningless and kept only for shape.
pub fn ood_episode_samples(
    cfg: &RunConfig,
    model: &Model,
    dataset: &Dataset<f64>,
    ood: &Dataset<f64>,
    opts: &OodOptions,
    index: usize,
) -> Result<(SampleMatrix, SampleMatrix)> {
    let pool = ood_pool(cfg, dataset, ood)?;
    ood_pair(cfg, model, dataset, ood, &pool, opts, index)
}

/// Paired comparison of predictive entropy on in-distribution queries and
/// on queries drawn from `ood`, both predicted from the same support set
/// and the same posterior draws.
pub fn ood_experiment(
    cfg: &RunConfig,
    model: &Model,
    dataset: &Dataset<f64>,
    ood: &Dataset<f64>,
    opts: &OodOptions,
) -> Result<OodReport> {
    if opts.n_episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    let pool = ood_pool(cfg, dataset, ood)?;
    let per_episode = map_indexed(opts.n_episodes, |i| {
        let (a, b) = ood_pair(cfg, model, dataset, ood, &pool, opts, i)?;
        Ok((uncertainty_metrics(&a.probs)?, uncertainty_metrics(&b.probs)?))
    })?;
    let mut episodes = Vec::with_capacity(opts.n_episodes);
    let mut inputs = Vec::new();
    for (i, (a, b)) in per_episode.into_iter().enumerate() {
        episodes.push(OodEpisode {
            episode: i,
            in_entropy: mean_of(&a, |u| u.pred_entropy),
            ood_entropy: mean_of(&b, |u| u.pred_entropy),
            in_mi: mean_of(&a, |u| u.mi),
            ood_mi: mean_of(&b, |u| u.mi),
        });
        inputs.extend(a.into_iter().map(|u| (i, false, u)));
        inputs.extend(b.into_iter().map(|u| (i, true, u)));
    }
    let wins = episodes.iter().filter(|e| e.ood_entropy > e.in_entropy).count();
    let losses = episodes.iter().filter(|e| e.ood_entropy < e.in_entropy).count();
    let trials = wins + losses;
    Ok(OodReport {
        p_value: sign_test_p(wins, trials),
        episodes,
        wins,
        trials,
        inputs,
    })
}
