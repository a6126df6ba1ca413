use std::sync::Arc;

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::{batchnorm, conv, pool, Tensor};

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

impl<'t, S: Scalar> Var<'t, S> {
    fn unary(self, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        self.tape.push(value, op)
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value().zip_with(&other.value(), "add", |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value().zip_with(&other.value(), "sub", |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value().zip_with(&other.value(), "mul", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id)))
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value().zip_with(&other.value(), "div", |a, b| a / b)?;
        Ok(self.tape.push(v, Op::Div(self.id, other.id)))
    }

    pub fn neg(self) -> Var<'t, S> {
        self.unary(self.value().map(|a| -a), Op::Neg(self.id))
    }

    pub fn scale(self, s: S) -> Var<'t, S> {
        self.unary(self.value().map(|a| a * s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: S) -> Var<'t, S> {
        self.unary(self.value().map(|a| a + s), Op::AddScalar(self.id))
    }

    pub fn square(self) -> Var<'t, S> {
        self.mul(self).expect("same shape")
    }

    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t, S>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, S>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn tanh(self) -> Var<'t, S> {
        self.unary(self.value().map(|a| a.tanh()), Op::Tanh(self.id))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t, S> {
        self.unary(self.value().map(|a| a.max(S::zero())), Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t, S> {
        self.unary(self.value().map(|a| a.exp()), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t, S> {
        self.unary(self.value().map(|a| a.ln()), Op::Log(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        self.unary(self.value().map(scalar::sigmoid), Op::Sigmoid(self.id))
    }

    pub fn softplus(self) -> Var<'t, S> {
        self.unary(self.value().map(scalar::softplus), Op::Softplus(self.id))
    }

    pub fn sqrt(self) -> Var<'t, S> {
        self.unary(self.value().map(|a| a.sqrt()), Op::Sqrt(self.id))
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(self) -> Var<'t, S> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = S::lit(self.value().len() as f64);
        self.sum().scale(S::one() / n)
    }

    /// `[B, n] -> [n]`.
    pub fn sum_rows(self) -> Result<Var<'t, S>> {
        let x = self.value();
        let (r, c) = x.dims2("sum_rows")?;
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&x.data()[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Ok(self.unary(Tensor::vector(out), Op::SumRows(self.id)))
    }

    /// `[B, n] -> [B]`.
    pub fn sum_cols(self) -> Result<Var<'t, S>> {
        let x = self.value();
        let (r, c) = x.dims2("sum_cols")?;
        let out = (0..r)
            .map(|i| x.data()[i * c..(i + 1) * c].iter().copied().sum())
            .collect();
        Ok(self.unary(Tensor::vector(out), Op::SumCols(self.id)))
    }

    /// `[n] -> [rows, n]`.
    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        if x.ndim() != 1 {
            return Err(Error::dim("broadcast_rows", x.shape(), &[rows, x.len()]));
        }
        let n = x.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(x.data());
        }
        Ok(self.unary(Tensor::from_parts(vec![rows, n], out), Op::BroadcastRows(self.id)))
    }

    /// `[B] -> [B, cols]`.
    pub fn broadcast_cols(self, cols: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        if x.ndim() != 1 {
            return Err(Error::dim("broadcast_cols", x.shape(), &[x.len(), cols]));
        }
        let mut out = Vec::with_capacity(x.len() * cols);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, cols));
        }
        Ok(self.unary(
            Tensor::from_parts(vec![x.len(), cols], out),
            Op::BroadcastCols(self.id),
        ))
    }

    /// Single element to any shape.
    pub fn broadcast_scalar(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let x = self.value();
        if x.len() != 1 {
            return Err(Error::dim("broadcast_scalar", x.shape(), shape));
        }
        Ok(self.unary(Tensor::full(shape.to_vec(), x.item()), Op::BroadcastScalar(self.id)))
    }

    /// `x[B, n] + b[n]` with the bias broadcast over rows.
    pub fn add_row(self, bias: Var<'t, S>) -> Result<Var<'t, S>> {
        let (rows, cols) = self.value().dims2("add_row")?;
        if bias.shape() != [cols] {
            return Err(Error::dim("add_row", &self.shape(), &bias.shape()));
        }
        self.add(bias.broadcast_rows(rows)?)
    }

    /// `x[B, n] ⊙ v[n]` with `v` broadcast over rows.
    pub fn mul_row(self, v: Var<'t, S>) -> Result<Var<'t, S>> {
        let (rows, cols) = self.value().dims2("mul_row")?;
        if v.shape() != [cols] {
            return Err(Error::dim("mul_row", &self.shape(), &v.shape()));
        }
        self.mul(v.broadcast_rows(rows)?)
    }

    pub fn concat_cols(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let values: Vec<Tensor<S>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let (r, c) = v.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", values[0].shape(), v.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(first.tape.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    pub fn concat_rows(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let values: Vec<Tensor<S>> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for v in &values {
            let (r, c) = v.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::dim("concat_rows", values[0].shape(), v.shape()));
            }
            rows += r;
            out.extend_from_slice(v.data());
        }
        Ok(first.tape.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let (r, c) = x.dims2("slice_cols")?;
        if start > end || end > c {
            return Err(Error::dim("slice_cols", x.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&x.data()[i * c + start..i * c + end]);
        }
        Ok(self.unary(
            Tensor::from_parts(vec![r, end - start], out),
            Op::SliceCols(self.id, start, end),
        ))
    }

    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t, S>> {
        let v = self.value().gather_rows(index)?;
        Ok(self.unary(v, Op::GatherRows(self.id, Arc::new(index.to_vec()))))
    }

    /// Adds row `i` of `self` into row `index[i]` of a zero `[rows, c]` tensor.
    pub fn scatter_rows(self, index: &[usize], rows: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let (r, c) = x.dims2("scatter_rows")?;
        if index.len() != r {
            return Err(Error::dim("scatter_rows", x.shape(), &[index.len()]));
        }
        let mut out = vec![S::zero(); rows * c];
        for (i, &dst) in index.iter().enumerate() {
            if dst >= rows {
                return Err(Error::Index {
                    context: "scatter_rows",
                    index: dst,
                    bound: rows,
                });
            }
            for j in 0..c {
                out[dst * c + j] += x.data()[i * c + j];
            }
        }
        Ok(self.unary(
            Tensor::from_parts(vec![rows, c], out),
            Op::ScatterRows(self.id, Arc::new(index.to_vec())),
        ))
    }

    /// Row-wise log-softmax with the max shift.
    pub fn log_softmax(self) -> Result<Var<'t, S>> {
        let x = self.value();
        let (r, c) = x.dims2("log_softmax")?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        Ok(self.unary(Tensor::from_parts(vec![r, c], out), Op::LogSoftmax(self.id)))
    }

    pub fn softmax(self) -> Result<Var<'t, S>> {
        Ok(self.log_softmax()?.exp())
    }

    /// `y[i] = x[i, index[i]]` for a 2-D node.
    pub fn pick(self, index: &[usize]) -> Result<Var<'t, S>> {
        let x = self.value();
        let (r, c) = x.dims2("pick")?;
        if index.len() != r {
            return Err(Error::dim("pick", x.shape(), &[index.len()]));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in index.iter().enumerate() {
            if j >= c {
                return Err(Error::Index {
                    context: "pick",
                    index: j,
                    bound: c,
                });
            }
            out.push(x.data()[i * c + j]);
        }
        Ok(self.unary(
            Tensor::vector(out),
            Op::Pick(self.id, Arc::new(index.to_vec())),
        ))
    }

    /// 3×3 convolution, stride 1, zero padding 1, over `[B, C, H, W]`.
    pub fn conv2d(self, weight: Var<'t, S>, bias: Var<'t, S>) -> Result<Var<'t, S>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        conv::check(x.shape(), w.shape(), b.shape())?;
        let y = conv::forward(&x, &w, &b);
        Ok(self.tape.push(y, Op::Conv2d(self.id, weight.id, bias.id)))
    }

    pub fn max_pool2(self) -> Result<Var<'t, S>> {
        let (y, arg) = pool::max_pool2(&self.value())?;
        Ok(self.unary(y, Op::MaxPool2(self.id, Arc::new(arg))))
    }

    /// Per-channel normalization. In `Train` mode batch statistics are used
    /// and returned as `(mean, biased variance)`; in `Eval` mode the supplied
    /// running statistics are used.
    pub fn batch_norm(
        self,
        gamma: Var<'t, S>,
        beta: Var<'t, S>,
        mode: NormMode,
        running: Option<(&[S], &[S])>,
    ) -> Result<(Var<'t, S>, Option<(Vec<S>, Vec<S>)>)> {
        let x = self.value();
        let (b, c, _) = batchnorm::layout(x.shape())?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim("batchnorm", x.shape(), &gamma.shape()));
        }
        let eps = S::lit(batchnorm::EPS);
        let (mean, var, batch) = match mode {
            NormMode::Train => {
                if b < 2 {
                    return Err(Error::Contract(
                        "batch normalization in training mode needs at least 2 examples".into(),
                    ));
                }
                let (m, v) = batchnorm::stats(&x)?;
                (m.clone(), v.clone(), Some((m, v)))
            }
            NormMode::Eval => {
                let (m, v) = running.ok_or_else(|| {
                    Error::Contract("evaluation-mode batchnorm needs running statistics".into())
                })?;
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("batchnorm", &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = batchnorm::apply(&x, &mean, &inv_std, &gamma.value(), &beta.value());
        let out = self.tape.push(
            y,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std: Arc::new(inv_std),
                train: mode == NormMode::Train,
            },
        );
        Ok((out, batch))
    }
}

fn frozen<'t, S: Scalar>(tape: &'t Tape<S>, name: &'static str, value: Tensor<S>, parents: Vec<usize>) -> Var<'t, S> {
    tape.push(value, Op::Frozen(name, parents))
}

fn one_hot<S: Scalar>(index: &[usize], cols: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); index.len() * cols];
    for (i, &j) in index.iter().enumerate() {
        data[i * cols + j] = S::one();
    }
    Tensor::from_parts(vec![index.len(), cols], data)
}

fn relu_mask<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { S::one() } else { S::zero() })
}

/// Adjoint contributions of node `id` to its parents given its adjoint `g`.
pub(super) fn vjp<'t, S: Scalar>(
    tape: &'t Tape<S>,
    id: usize,
    op: &Op<S>,
    g: Var<'t, S>,
) -> Result<Vec<(usize, Var<'t, S>)>> {
    let v = |i: usize| tape.var(i);
    let y = v(id);
    Ok(match op {
        Op::Leaf => vec![],
        Op::Frozen(name, _) => {
            return Err(Error::Unsupported(format!(
                "differentiating the adjoint of {name} a second time"
            )))
        }
        Op::Add(a, b) => vec![(*a, g), (*b, g)],
        Op::Sub(a, b) => vec![(*a, g), (*b, g.neg())],
        Op::Mul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if tape.needs_grad(*a) {
                out.push((*a, g.mul(v(*b))?));
            }
            if tape.needs_grad(*b) {
                out.push((*b, g.mul(v(*a))?));
            }
            out
        }
        Op::Div(a, b) => vec![(*a, g.div(v(*b))?), (*b, g.mul(y)?.div(v(*b))?.neg())],
        Op::Neg(a) => vec![(*a, g.neg())],
        Op::Scale(a, s) => vec![(*a, g.scale(*s))],
        Op::AddScalar(a) => vec![(*a, g)],
        Op::MatMul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if tape.needs_grad(*a) {
                out.push((*a, g.matmul(v(*b).transpose()?)?));
            }
            if tape.needs_grad(*b) {
                out.push((*b, v(*a).transpose()?.matmul(g)?));
            }
            out
        }
        Op::Transpose(a) => vec![(*a, g.transpose()?)],
        Op::Reshape(a) => vec![(*a, g.reshape(v(*a).shape())?)],
        Op::Tanh(a) => {
            let d = y.square().neg().add_scalar(S::one());
            vec![(*a, g.mul(d)?)]
        }
        Op::Relu(a) => {
            let mask = tape.constant(relu_mask(&v(*a).value()));
            vec![(*a, g.mul(mask)?)]
        }
        Op::Exp(a) => vec![(*a, g.mul(y)?)],
        Op::Log(a) => vec![(*a, g.div(v(*a))?)],
        Op::Sigmoid(a) => {
            let d = y.mul(y.neg().add_scalar(S::one()))?;
            vec![(*a, g.mul(d)?)]
        }
        Op::Softplus(a) => vec![(*a, g.mul(v(*a).sigmoid())?)],
        Op::Sqrt(a) => vec![(*a, g.div(y)?.scale(S::lit(0.5)))],
        Op::Sum(a) => vec![(*a, g.broadcast_scalar(&v(*a).shape())?)],
        Op::SumRows(a) => {
            let rows = v(*a).shape()[0];
            vec![(*a, g.broadcast_rows(rows)?)]
        }
        Op::SumCols(a) => {
            let cols = v(*a).shape()[1];
            vec![(*a, g.broadcast_cols(cols)?)]
        }
        Op::BroadcastRows(a) => vec![(*a, g.sum_rows()?)],
        Op::BroadcastCols(a) => vec![(*a, g.sum_cols()?)],
        Op::BroadcastScalar(a) => vec![(*a, g.sum().reshape(v(*a).shape())?)],
        Op::ConcatCols(parts) => {
            let mut out = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let w = v(p).shape()[1];
                out.push((p, g.slice_cols(offset, offset + w)?));
                offset += w;
            }
            out
        }
        Op::ConcatRows(parts) => {
            let mut out = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let r = v(p).shape()[0];
                let idx: Vec<usize> = (offset..offset + r).collect();
                out.push((p, g.gather_rows(&idx)?));
                offset += r;
            }
            out
        }
        Op::SliceCols(a, start, end) => {
            let shape = v(*a).shape();
            let (rows, cols) = (shape[0], shape[1]);
            let mut parts = Vec::with_capacity(3);
            if *start > 0 {
                parts.push(tape.constant(Tensor::zeros(vec![rows, *start])));
            }
            parts.push(g);
            if *end < cols {
                parts.push(tape.constant(Tensor::zeros(vec![rows, cols - end])));
            }
            vec![(*a, Var::concat_cols(&parts)?)]
        }
        Op::GatherRows(a, idx) => {
            let rows = v(*a).shape()[0];
            vec![(*a, g.scatter_rows(idx, rows)?)]
        }
        Op::ScatterRows(a, idx) => vec![(*a, g.gather_rows(idx)?)],
        Op::LogSoftmax(a) => {
            let cols = y.shape()[1];
            let total = g.sum_cols()?.broadcast_cols(cols)?;
            vec![(*a, g.sub(y.exp().mul(total)?)?)]
        }
        Op::Pick(a, idx) => {
            let cols = v(*a).shape()[1];
            let hot = tape.constant(one_hot(idx, cols));
            vec![(*a, hot.mul(g.broadcast_cols(cols)?)?)]
        }
        Op::Conv2d(x, w, b) => {
            let (dx, dw, db) = conv::backward(&v(*x).value(), &v(*w).value(), &g.value());
            let parents = vec![*x, *w, *b, g.id];
            vec![
                (*x, frozen(tape, "conv2d", dx, parents.clone())),
                (*w, frozen(tape, "conv2d", dw, parents.clone())),
                (*b, frozen(tape, "conv2d", db, parents)),
            ]
        }
        Op::MaxPool2(x, arg) => {
            let dx = pool::max_pool2_backward(&v(*x).shape(), arg, &g.value());
            vec![(*x, frozen(tape, "max_pool2", dx, vec![*x, g.id]))]
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let gv = g.value();
            let gam = v(*gamma).value();
            let (dx, dgamma, dbeta) = if *train {
                batchnorm::backward_train(xhat, inv_std, &gam, &gv)
            } else {
                batchnorm::backward_eval(xhat, inv_std, &gam, &gv)
            };
            let parents = vec![*x, *gamma, *beta, g.id];
            vec![
                (*x, frozen(tape, "batch_norm", dx, parents.clone())),
                (*gamma, frozen(tape, "batch_norm", dgamma, parents.clone())),
                (*beta, frozen(tape, "batch_norm", dbeta, parents)),
            ]
        }
    })
}

/// Tangent of node `id` given the tangents of its parents (`None` = zero).
pub(super) fn jvp_rule<'t, S: Scalar>(
    tape: &'t Tape<S>,
    id: usize,
    op: &Op<S>,
    t: &dyn Fn(usize) -> Option<Var<'t, S>>,
) -> Result<Var<'t, S>> {
    let v = |i: usize| tape.var(i);
    let y = v(id);
    let zeros_like = |i: usize| tape.constant(Tensor::zeros(v(i).shape()));
    let sum_opt = |a: Option<Var<'t, S>>, b: Option<Var<'t, S>>| -> Result<Var<'t, S>> {
        match (a, b) {
            (Some(a), Some(b)) => a.add(b),
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => Ok(zeros_like(id)),
        }
    };
    let ta = |a: usize| t(a).unwrap_or_else(|| zeros_like(a));
    Ok(match op {
        Op::Leaf => zeros_like(id),
        Op::Frozen(name, _) => {
            return Err(Error::Unsupported(format!("forward-mode through the adjoint of {name}")))
        }
        Op::Add(a, b) => sum_opt(t(*a), t(*b))?,
        Op::Sub(a, b) => sum_opt(t(*a), t(*b).map(|x| x.neg()))?,
        Op::Mul(a, b) => {
            let l = t(*a).map(|x| x.mul(v(*b))).transpose()?;
            let r = t(*b).map(|x| v(*a).mul(x)).transpose()?;
            sum_opt(l, r)?
        }
        Op::Div(a, b) => {
            let l = t(*a);
            let r = t(*b).map(|x| y.mul(x).map(|p| p.neg())).transpose()?;
            sum_opt(l, r)?.div(v(*b))?
        }
        Op::Neg(a) => ta(*a).neg(),
        Op::Scale(a, s) => ta(*a).scale(*s),
        Op::AddScalar(a) => ta(*a),
        Op::MatMul(a, b) => {
            let l = t(*a).map(|x| x.matmul(v(*b))).transpose()?;
            let r = t(*b).map(|x| v(*a).matmul(x)).transpose()?;
            sum_opt(l, r)?
        }
        Op::Transpose(a) => ta(*a).transpose()?,
        Op::Reshape(a) => ta(*a).reshape(y.shape())?,
        Op::Tanh(a) => ta(*a).mul(y.square().neg().add_scalar(S::one()))?,
        Op::Relu(a) => ta(*a).mul(tape.constant(relu_mask(&v(*a).value())))?,
        Op::Exp(a) => ta(*a).mul(y)?,
        Op::Log(a) => ta(*a).div(v(*a))?,
        Op::Sigmoid(a) => ta(*a).mul(y.mul(y.neg().add_scalar(S::one()))?)?,
        Op::Softplus(a) => ta(*a).mul(v(*a).sigmoid())?,
        Op::Sqrt(a) => ta(*a).div(y)?.scale(S::lit(0.5)),
        Op::Sum(a) => ta(*a).sum(),
        Op::SumRows(a) => ta(*a).sum_rows()?,
        Op::SumCols(a) => ta(*a).sum_cols()?,
        Op::BroadcastRows(a) => ta(*a).broadcast_rows(y.shape()[0])?,
        Op::BroadcastCols(a) => ta(*a).broadcast_cols(y.shape()[1])?,
        Op::BroadcastScalar(a) => ta(*a).broadcast_scalar(&y.shape())?,
        Op::ConcatCols(parts) => {
            let ts: Vec<Var<'t, S>> = parts.iter().map(|&p| ta(p)).collect();
            Var::concat_cols(&ts)?
        }
        Op::ConcatRows(parts) => {
            let ts: Vec<Var<'t, S>> = parts.iter().map(|&p| ta(p)).collect();
            Var::concat_rows(&ts)?
        }
        Op::SliceCols(a, s, e) => ta(*a).slice_cols(*s, *e)?,
        Op::GatherRows(a, idx) => ta(*a).gather_rows(idx)?,
        Op::ScatterRows(a, idx) => ta(*a).scatter_rows(idx, y.shape()[0])?,
        Op::LogSoftmax(a) => {
            let dx = ta(*a);
            let cols = y.shape()[1];
            let mean = y.exp().mul(dx)?.sum_cols()?.broadcast_cols(cols)?;
            dx.sub(mean)?
        }
        Op::Pick(a, idx) => ta(*a).pick(idx)?,
        Op::Conv2d(..) | Op::MaxPool2(..) | Op::BatchNorm { .. } => {
            return Err(Error::Unsupported(
                "forward-mode through convolution, pooling or batch normalization".into(),
            ))
        }
    })
}
