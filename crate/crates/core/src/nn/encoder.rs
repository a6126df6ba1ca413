use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv_block, global_avg_pool, linear, ConvBlock};
use super::params::{uniform_init, Bound, ParamSet};
use crate::autodiff::{NormMode, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running-average momentum for batchnorm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Encoder architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// flatten → linear+ReLU → linear.
    Mlp {
        input_dim: usize,
        hidden: usize,
        emb: usize,
    },
    /// Four conv3x3/batchnorm/ReLU/max-pool blocks, average-pooled to `filters`.
    Conv4 {
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
    },
}

/// Batch statistics observed by one batchnorm layer: `(layer, mean, var, count)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub layer: usize,
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub count: usize,
}

impl EncoderSpec {
    pub fn emb(&self) -> usize {
        match *self {
            EncoderSpec::Mlp { emb, .. } => emb,
            EncoderSpec::Conv4 { filters, .. } => filters,
        }
    }

    /// Flattened length of one input example.
    pub fn input_len(&self) -> usize {
        match *self {
            EncoderSpec::Mlp { input_dim, .. } => input_dim,
            EncoderSpec::Conv4 {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EncoderSpec::Mlp {
                input_dim,
                hidden,
                emb,
            } => input_dim > 0 && hidden > 0 && emb > 0,
            EncoderSpec::Conv4 {
                channels,
                height,
                width,
                filters,
            } => channels > 0 && height > 0 && width > 0 && filters > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("encoder sizes must be positive: {self:?}")))
        }
    }

    pub fn init<S: Scalar>(&self, rng: &mut impl Rng) -> Result<ParamSet<S>> {
        let mut p = ParamSet::new();
        match *self {
            EncoderSpec::Mlp {
                input_dim,
                hidden,
                emb,
            } => {
                for (i, (fi, fo)) in [(input_dim, hidden), (hidden, emb)].into_iter().enumerate() {
                    p.insert(format!("encoder/layer{i}/weight"), uniform_init(rng, &[fi, fo], fi))?;
                    p.insert(format!("encoder/layer{i}/bias"), uniform_init(rng, &[fo], fi))?;
                }
            }
            EncoderSpec::Conv4 {
                channels, filters, ..
            } => {
                for i in 0..4 {
                    let cin = if i == 0 { channels } else { filters };
                    let fan = cin * 9;
                    p.insert(
                        format!("encoder/block{i}/conv/weight"),
                        uniform_init(rng, &[filters, cin, 3, 3], fan),
                    )?;
                    p.insert(format!("encoder/block{i}/conv/bias"), uniform_init(rng, &[filters], fan))?;
                    p.insert(format!("encoder/block{i}/bn/gamma"), Tensor::ones([filters]))?;
                    p.insert(format!("encoder/block{i}/bn/beta"), Tensor::zeros([filters]))?;
                }
            }
        }
        Ok(p)
    }

    /// Batchnorm running statistics, initialised to mean 0 and variance 1.
    pub fn init_running<S: Scalar>(&self) -> ParamSet<S> {
        let mut p = ParamSet::new();
        if let EncoderSpec::Conv4 { filters, .. } = *self {
            for i in 0..4 {
                p.insert(format!("bn/block{i}/mean"), Tensor::zeros([filters]))
                    .expect("fresh names");
                p.insert(format!("bn/block{i}/var"), Tensor::ones([filters]))
                    .expect("fresh names");
            }
        }
        p
    }

    /// Maps `x: [B, input_len]` to embeddings `[B, emb]`.
    pub fn encode<'t, S: Scalar>(
        &self,
        x: Var<'t, S>,
        params: &Bound<'t, S>,
        mode: NormMode,
        running: &ParamSet<S>,
    ) -> Result<(Var<'t, S>, Vec<BatchStats<S>>)> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_len() {
            return Err(Error::dim("encode", &shape, &[shape[0], self.input_len()]));
        }
        match *self {
            EncoderSpec::Mlp { .. } => {
                let layer = |h, i: usize| {
                    linear(
                        h,
                        params.get(&format!("encoder/layer{i}/weight"))?,
                        params.get(&format!("encoder/layer{i}/bias"))?,
                    )
                };
                let h = layer(x, 0)?.relu();
                Ok((layer(h, 1)?, Vec::new()))
            }
            EncoderSpec::Conv4 {
                channels,
                height,
                width,
                ..
            } => {
                let batch = shape[0];
                let mut h = x.reshape([batch, channels, height, width])?;
                let mut stats = Vec::new();
                for i in 0..4 {
                    let blk = ConvBlock {
                        weight: params.get(&format!("encoder/block{i}/conv/weight"))?,
                        bias: params.get(&format!("encoder/block{i}/conv/bias"))?,
                        gamma: params.get(&format!("encoder/block{i}/bn/gamma"))?,
                        beta: params.get(&format!("encoder/block{i}/bn/beta"))?,
                    };
                    let s = h.shape();
                    let pool = s[2] >= 2 && s[3] >= 2;
                    let count = batch * s[2] * s[3];
                    let run = match mode {
                        NormMode::Train => None,
                        NormMode::Eval => Some((
                            running.get(&format!("bn/block{i}/mean"))?.data(),
                            running.get(&format!("bn/block{i}/var"))?.data(),
                        )),
                    };
                    let (out, st) = conv_block(h, &blk, mode, run, pool)?;
                    if let Some((mean, var)) = st {
                        stats.push(BatchStats {
                            layer: i,
                            mean,
                            var,
                            count,
                        });
                    }
                    h = out;
                }
                let s = h.shape();
                let emb = if s[2] * s[3] > 1 {
                    global_avg_pool(h)?
                } else {
                    h.reshape([s[0], s[1]])?
                };
                Ok((emb, stats))
            }
        }
    }
}

/// Exponential running average of batch statistics (unbiased variance).
pub fn update_running<S: Scalar>(running: &mut ParamSet<S>, stats: &[BatchStats<S>]) -> Result<()> {
    let m = S::lit(BN_MOMENTUM);
    for st in stats {
        let correction = if st.count > 1 {
            S::lit(st.count as f64 / (st.count - 1) as f64)
        } else {
            S::one()
        };
        let mk = format!("bn/block{}/mean", st.layer);
        let vk = format!("bn/block{}/var", st.layer);
        let mean = running.get(&mk)?.clone();
        let var = running.get(&vk)?.clone();
        let new_mean: Vec<S> = mean
            .data()
            .iter()
            .zip(&st.mean)
            .map(|(&r, &b)| (S::one() - m) * r + m * b)
            .collect();
        let new_var: Vec<S> = var
            .data()
            .iter()
            .zip(&st.var)
            .map(|(&r, &b)| (S::one() - m) * r + m * b * correction)
            .collect();
        running.set(&mk, Tensor::vector(new_mean))?;
        running.set(&vk, Tensor::vector(new_var))?;
    }
    Ok(())
}
