//! H_φ: support set → parameters controlling the per-task head update.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::episodes::TaskEpisode;
use crate::error::{Error, Result};
use crate::nn::{linear, uniform_init, Bound, ParamSet};
use crate::scalar::{softplus_inverse, Scalar};
use crate::target::{head_logits, HeadWeights};
use crate::tensor::Tensor;

/// Lower bound added to `softplus(ρ)`.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Initial posterior standard deviation.
pub const SIGMA_INIT: f64 = 0.05;

/// Constant offset added to the raw ρ output so that a zero output gives
/// `σ = SIGMA_INIT`.
pub fn rho0() -> f64 {
    softplus_inverse(SIGMA_INIT - SIGMA_FLOOR)
}

fn default_hidden() -> usize {
    256
}

fn default_c_dim() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSpec {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Width of the flow conditioning vector.
    #[serde(default = "default_c_dim")]
    pub c_dim: usize,
    /// Start with a zero final layer (posterior centred on θ).
    #[serde(default)]
    pub zero_init_final: bool,
}

impl Default for HyperSpec {
    fn default() -> Self {
        HyperSpec {
            hidden: default_hidden(),
            c_dim: default_c_dim(),
            zero_init_final: false,
        }
    }
}

/// What the hypernetwork emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperKind {
    /// Point update Δθ (HyperMAML).
    Point,
    /// Mean and raw scale of a diagonal Gaussian.
    Gaussian,
    /// Conditioning vector of a flow.
    Cnf,
}

impl HyperSpec {
    pub fn input_width(emb: usize, n_way: usize) -> usize {
        emb + 2 * n_way
    }

    pub fn output_width(&self, kind: HyperKind, emb: usize) -> usize {
        match kind {
            HyperKind::Point => emb + 1,
            HyperKind::Gaussian => 2 * (emb + 1),
            HyperKind::Cnf => self.c_dim,
        }
    }

    /// Three fully-connected layers, `hyper/layer{0,1,2}/{weight,bias}`.
    pub fn init<S: Scalar>(&self, kind: HyperKind, emb: usize, n_way: usize, rng: &mut impl Rng) -> Result<ParamSet<S>> {
        if self.hidden == 0 || self.c_dim == 0 {
            return Err(Error::Config("hypernetwork widths must be positive".into()));
        }
        let dims = [
            Self::input_width(emb, n_way),
            self.hidden,
            self.hidden,
            self.output_width(kind, emb),
        ];
        let mut p = ParamSet::new();
        for i in 0..3 {
            let (fi, fo) = (dims[i], dims[i + 1]);
            let (w, b) = if i == 2 && self.zero_init_final {
                (Tensor::zeros([fi, fo]), Tensor::zeros([fo]))
            } else {
                (uniform_init(rng, &[fi, fo], fi), uniform_init(rng, &[fo], fi))
            };
            p.insert(format!("hyper/layer{i}/weight"), w)?;
            p.insert(format!("hyper/layer{i}/bias"), b)?;
        }
        Ok(p)
    }
}

fn row_cmp<S: Scalar>(a: &[S], b: &[S]) -> Ordering {
    let bytes = |r: &[S]| -> Vec<u8> { r.iter().flat_map(|v| v.as_f64().to_le_bytes()).collect() };
    bytes(a).cmp(&bytes(b))
}

/// Permutation sorting support rows by local class, then by raw input bytes.
pub fn canonical_support_order<S: Scalar>(x: &Tensor<S>, y: &[usize]) -> Result<Vec<usize>> {
    let (n, d) = x.dims2("canonical_support_order")?;
    if y.len() != n {
        return Err(Error::dim("canonical_support_order", x.shape(), &[y.len()]));
    }
    let row = |i: usize| &x.data()[i * d..(i + 1) * d];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].cmp(&y[b]).then_with(|| row_cmp(row(a), row(b))));
    Ok(order)
}

/// Copy of the episode with its support rows in canonical order.
pub fn canonicalize<S: Scalar>(ep: &TaskEpisode<S>) -> Result<TaskEpisode<S>> {
    let order = canonical_support_order(&ep.support_x, &ep.support_y)?;
    Ok(TaskEpisode {
        support_x: ep.support_x.gather_rows(&order)?,
        support_y: order.iter().map(|&i| ep.support_y[i]).collect(),
        support_refs: order.iter().map(|&i| ep.support_refs[i]).collect(),
        ..ep.clone()
    })
}

/// Rows `concat(e_s, one-hot y_s, softmax ŷ_s)` grouped by class.
#[derive(Clone, Debug)]
pub struct EnhancedSupport<'t, S> {
    pub rows: Var<'t, S>,
    pub labels: Vec<usize>,
    pub n_way: usize,
}

/// Builds the hypernetwork input from canonically ordered support
/// embeddings. The prediction block is computed from detached copies of the
/// embeddings and the universal head, so no gradient flows through it.
pub fn enhance<'t, S: Scalar>(
    embeddings: Var<'t, S>,
    labels: &[usize],
    head: Var<'t, S>,
    n_way: usize,
) -> Result<EnhancedSupport<'t, S>> {
    enhance_with(embeddings, labels, None, head, n_way)
}

/// Softmax predictions of the universal head on support embeddings, as
/// plain values: no gradient flows through this branch.
pub fn support_predictions<'t, S: Scalar>(embeddings: Var<'t, S>, head: Var<'t, S>, n_way: usize) -> Result<Tensor<S>> {
    Ok(head_logits(embeddings.detach(), head.detach(), n_way)?.softmax()?.value())
}

/// [`enhance`] with the prediction block optionally supplied by the caller
/// (`[n, n_way]`, rows in the same order as `embeddings`).
pub fn enhance_with<'t, S: Scalar>(
    embeddings: Var<'t, S>,
    labels: &[usize],
    predictions: Option<&Tensor<S>>,
    head: Var<'t, S>,
    n_way: usize,
) -> Result<EnhancedSupport<'t, S>> {
    let (n, _) = embeddings.value().dims2("enhance")?;
    if n == 0 {
        return Err(Error::Contract("support set is empty".into()));
    }
    if labels.len() != n {
        return Err(Error::dim("enhance", &[n], &[labels.len()]));
    }
    if labels.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("support rows must be sorted by class".into()));
    }
    let tape = embeddings.tape();
    let mut one_hot = vec![S::zero(); n * n_way];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_way {
            return Err(Error::Index {
                context: "enhance label",
                index: y,
                bound: n_way,
            });
        }
        one_hot[i * n_way + y] = S::one();
    }
    let one_hot = tape.constant(Tensor::new([n, n_way], one_hot)?);
    let y_hat = match predictions {
        Some(p) if p.shape() != [n, n_way] => return Err(Error::dim("enhance", p.shape(), &[n, n_way])),
        Some(p) => tape.constant(p.clone()),
        None => tape.constant(support_predictions(embeddings, head, n_way)?),
    };
    Ok(EnhancedSupport {
        rows: Var::concat_cols(&[embeddings, one_hot, y_hat])?,
        labels: labels.to_vec(),
        n_way,
    })
}

/// Hypernetwork output.
#[derive(Clone, Copy, Debug)]
pub enum HyperOutput<'t, S> {
    Point { delta: Var<'t, S> },
    /// `rho` already includes the constant offset [`rho0`].
    Gaussian { mu: Var<'t, S>, rho: Var<'t, S> },
    Cnf { c: Var<'t, S> },
}

/// Mean-pools each class's rows, maps every pooled vector through the shared
/// three-layer MLP and assembles the class outputs in head layout.
pub fn hyper_forward<'t, S: Scalar>(
    es: &EnhancedSupport<'t, S>,
    phi: &Bound<'t, S>,
    kind: HyperKind,
) -> Result<HyperOutput<'t, S>> {
    let (n, width) = es.rows.value().dims2("hyper_forward")?;
    let w0 = phi.get("hyper/layer0/weight")?;
    if w0.shape()[0] != width {
        return Err(Error::dim("hyper_forward", &[n, width], &w0.shape()));
    }
    let n_way = es.n_way;
    let emb = width - 2 * n_way;
    let mut counts = vec![0usize; n_way];
    for &y in &es.labels {
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Contract(format!("class {c} has no support rows")));
    }
    let mut pool = vec![S::zero(); n_way * n];
    for (i, &y) in es.labels.iter().enumerate() {
        pool[y * n + i] = S::one() / S::lit(counts[y] as f64);
    }
    let pooled = es.rows.tape().constant(Tensor::new([n_way, n], pool)?).matmul(es.rows)?;

    let mut h = pooled;
    for i in 0..3 {
        h = linear(
            h,
            phi.get(&format!("hyper/layer{i}/weight"))?,
            phi.get(&format!("hyper/layer{i}/bias"))?,
        )?;
        if i < 2 {
            h = h.relu();
        }
    }
    let out_w = h.shape()[1];
    let head = HeadWeights::<S>::len_for(emb, n_way);
    match kind {
        HyperKind::Point => {
            if out_w != emb + 1 {
                return Err(Error::dim("hyper_forward", &[n_way, emb + 1], &h.shape()));
            }
            Ok(HyperOutput::Point {
                delta: h.reshape([head])?,
            })
        }
        HyperKind::Gaussian => {
            if out_w != 2 * (emb + 1) {
                return Err(Error::dim("hyper_forward", &[n_way, 2 * (emb + 1)], &h.shape()));
            }
            Ok(HyperOutput::Gaussian {
                mu: h.slice_cols(0, emb + 1)?.reshape([head])?,
                rho: h
                    .slice_cols(emb + 1, 2 * (emb + 1))?
                    .reshape([head])?
                    .add_scalar(S::lit(rho0())),
            })
        }
        HyperKind::Cnf => Ok(HyperOutput::Cnf {
            c: h.sum_rows()?.scale(S::one() / S::lit(n_way as f64)),
        }),
    }
}
