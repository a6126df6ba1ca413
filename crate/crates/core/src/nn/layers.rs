use crate::autodiff::{NormMode, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `x·w + b` for `x: [B, i]`, `w: [i, o]`, `b: [o]`.
pub fn linear<'t, S: Scalar>(x: Var<'t, S>, w: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
    x.matmul(w)?.add_row(b)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<'t, S: Scalar>(logits: Var<'t, S>, labels: &[usize]) -> Result<Var<'t, S>> {
    let (rows, classes) = logits.value().dims2("cross_entropy")?;
    if labels.len() != rows {
        return Err(Error::dim("cross_entropy", &[rows, classes], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index {
            context: "cross_entropy label",
            index: bad,
            bound: classes,
        });
    }
    Ok(logits.log_softmax()?.pick(labels)?.mean().neg())
}

/// Parameters of one convolutional block.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock<'t, S> {
    pub weight: Var<'t, S>,
    pub bias: Var<'t, S>,
    pub gamma: Var<'t, S>,
    pub beta: Var<'t, S>,
}

/// conv3x3 → batchnorm → ReLU → (optional) 2×2 max-pool.
///
/// Returns the batch statistics in training mode so callers can update
/// running averages.
pub fn conv_block<'t, S: Scalar>(
    x: Var<'t, S>,
    p: &ConvBlock<'t, S>,
    mode: NormMode,
    running: Option<(&[S], &[S])>,
    pool: bool,
) -> Result<(Var<'t, S>, Option<(Vec<S>, Vec<S>)>)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::dim("conv_block", &shape, &[0, 0, 0, 0]));
    }
    if pool && (shape[2] < 2 || shape[3] < 2) {
        return Err(Error::dim("conv_block", &shape, &[shape[0], shape[1], 2, 2]));
    }
    let h = x.conv2d(p.weight, p.bias)?;
    let (h, stats) = h.batch_norm(p.gamma, p.beta, mode, running)?;
    let h = h.relu();
    let h = if pool { h.max_pool2()? } else { h };
    Ok((h, stats))
}

/// Mean over spatial positions: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<'t, S: Scalar>(x: Var<'t, S>) -> Result<Var<'t, S>> {
    let shape = x.shape();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::dim("global_avg_pool", &shape, &[0, 0, 0, 0]));
    };
    x.reshape([b * c, h * w])?
        .sum_cols()?
        .scale(S::one() / S::lit((h * w) as f64))
        .reshape([b, c])
}
