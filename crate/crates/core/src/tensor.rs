//! Immutable row-major n-dimensional arrays and the eager kernels behind
//! every tape operation.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major n-dimensional array. Cloning is cheap: the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data.as_slice())
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        )
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::dim(op, &self.shape, &[0, 0])),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == S::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let a = self.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Index {
                    context: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Self::from_parts(vec![index.len(), c], out))
    }
}

/// Argument checks and kernels for 3×3, stride-1, zero-padded convolution
/// over `[B, C, H, W]` inputs.
pub(crate) mod conv {
    use super::*;

    pub fn check(x: &[usize], w: &[usize], b: &[usize]) -> Result<()> {
        let ok = x.len() == 4
            && w.len() == 4
            && w[2] == 3
            && w[3] == 3
            && x[1] == w[1]
            && b.len() == 1
            && b[0] == w[0];
        if ok {
            Ok(())
        } else {
            Err(Error::dim("conv3x3", x, w))
        }
    }

    pub fn forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        let (bs, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let o = w.shape[0];
        let xd = x.data();
        let wdat = w.data();
        let mut out = vec![S::zero(); bs * o * h * wd];
        for n in 0..bs {
            for oc in 0..o {
                let base = (n * o + oc) * h * wd;
                let bias = b.data[oc];
                out[base..base + h * wd].iter_mut().for_each(|v| *v = bias);
                for ic in 0..c {
                    let xin = &xd[(n * c + ic) * h * wd..(n * c + ic + 1) * h * wd];
                    let kern = &wdat[(oc * c + ic) * 9..(oc * c + ic + 1) * 9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let kv = kern[ky * 3 + kx];
                            if kv == S::zero() {
                                continue;
                            }
                            for y in 0..h {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for xx in 0..wd {
                                    let ix = xx as isize + kx as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    out[base + y * wd + xx] += kv * xin[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![bs, o, h, wd], out)
    }

    /// Adjoints `(dx, dw, db)` for upstream gradient `g`.
    pub fn backward<S: Scalar>(
        x: &Tensor<S>,
        w: &Tensor<S>,
        g: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
        let (bs, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let o = w.shape[0];
        let xd = x.data();
        let wdat = w.data();
        let gd = g.data();
        let mut dx = vec![S::zero(); x.len()];
        let mut dw = vec![S::zero(); w.len()];
        let mut db = vec![S::zero(); o];
        for n in 0..bs {
            for oc in 0..o {
                let gbase = (n * o + oc) * h * wd;
                db[oc] += gd[gbase..gbase + h * wd].iter().copied().sum::<S>();
                for ic in 0..c {
                    let xbase = (n * c + ic) * h * wd;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let kidx = (oc * c + ic) * 9 + ky * 3 + kx;
                            let kv = wdat[kidx];
                            let mut acc = S::zero();
                            for y in 0..h {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for xx in 0..wd {
                                    let ix = xx as isize + kx as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let gv = gd[gbase + y * wd + xx];
                                    let xi = xbase + iy as usize * wd + ix as usize;
                                    acc += gv * xd[xi];
                                    dx[xi] += gv * kv;
                                }
                            }
                            dw[kidx] += acc;
                        }
                    }
                }
            }
        }
        (
            Tensor::from_parts(x.shape.clone(), dx),
            Tensor::from_parts(w.shape.clone(), dw),
            Tensor::from_parts(vec![o], db),
        )
    }
}

/// 2×2 max pooling with floor semantics over `[B, C, H, W]`.
pub(crate) mod pool {
    use super::*;

    /// Returns the pooled tensor and, for each output, the flat input index
    /// that won the max.
    pub fn max_pool2<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
        if x.ndim() != 4 || x.shape[2] < 2 || x.shape[3] < 2 {
            return Err(Error::dim("maxpool2", &x.shape, &[0, 0, 2, 2]));
        }
        let (bs, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(bs * c * oh * ow);
        let mut arg = Vec::with_capacity(bs * c * oh * ow);
        let xd = x.data();
        for plane in 0..bs * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        Ok((Tensor::from_parts(vec![bs, c, oh, ow], out), arg))
    }

    pub fn max_pool2_backward<S: Scalar>(input_shape: &[usize], argmax: &[usize], g: &Tensor<S>) -> Tensor<S> {
        let mut dx = vec![S::zero(); input_shape.iter().product()];
        for (&i, &gv) in argmax.iter().zip(g.data()) {
            dx[i] += gv;
        }
        Tensor::from_parts(input_shape.to_vec(), dx)
    }
}

/// Per-channel batch normalization over `[B, C]` or `[B, C, H, W]`.
pub(crate) mod batchnorm {
    use super::*;

    pub const EPS: f64 = 1e-5;

    /// Channel count and spatial size of a batchnorm input.
    pub fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
        match shape {
            [b, c] => Ok((*b, *c, 1)),
            [b, c, h, w] => Ok((*b, *c, h * w)),
            _ => Err(Error::dim("batchnorm", shape, &[0, 0])),
        }
    }

    /// Per-channel mean and biased variance.
    pub fn stats<S: Scalar>(x: &Tensor<S>) -> Result<(Vec<S>, Vec<S>)> {
        let (b, c, hw) = layout(x.shape())?;
        let n = S::lit((b * hw) as f64);
        let xd = x.data();
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut acc = S::zero();
            for n_ in 0..b {
                let base = (n_ * c + ch) * hw;
                acc += xd[base..base + hw].iter().copied().sum::<S>();
            }
            let m = acc / n;
            let mut v = S::zero();
            for n_ in 0..b {
                let base = (n_ * c + ch) * hw;
                for &xv in &xd[base..base + hw] {
                    v += (xv - m) * (xv - m);
                }
            }
            mean[ch] = m;
            var[ch] = v / n;
        }
        Ok((mean, var))
    }

    /// `gamma * (x - mean) * inv_std + beta`, returning the output and the
    /// normalized activations.
    pub fn apply<S: Scalar>(
        x: &Tensor<S>,
        mean: &[S],
        inv_std: &[S],
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>) {
        let (b, c, hw) = layout(x.shape()).expect("validated layout");
        let xd = x.data();
        let mut out = vec![S::zero(); x.len()];
        let mut xhat = vec![S::zero(); x.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gamma.data[ch] * h + beta.data[ch];
                }
            }
        }
        (
            Tensor::from_parts(x.shape.clone(), out),
            Tensor::from_parts(x.shape.clone(), xhat),
        )
    }

    /// Adjoints for training mode (batch statistics depend on `x`).
    pub fn backward_train<S: Scalar>(
        xhat: &Tensor<S>,
        inv_std: &[S],
        gamma: &Tensor<S>,
        g: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
        let (b, c, hw) = layout(xhat.shape()).expect("validated layout");
        let m = S::lit((b * hw) as f64);
        let xh = xhat.data();
        let gd = g.data();
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    dgamma[ch] += gd[i] * xh[i];
                    dbeta[ch] += gd[i];
                }
            }
        }
        let mut dx = vec![S::zero(); xhat.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                let scale = gamma.data[ch] * inv_std[ch] / m;
                for i in base..base + hw {
                    dx[i] = scale * (m * gd[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                }
            }
        }
        (
            Tensor::from_parts(xhat.shape.clone(), dx),
            Tensor::from_parts(vec![c], dgamma),
            Tensor::from_parts(vec![c], dbeta),
        )
    }

    /// Adjoints for evaluation mode (fixed statistics).
    pub fn backward_eval<S: Scalar>(
        xhat: &Tensor<S>,
        inv_std: &[S],
        gamma: &Tensor<S>,
        g: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
        let (b, c, hw) = layout(xhat.shape()).expect("validated layout");
        let xh = xhat.data();
        let gd = g.data();
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        let mut dx = vec![S::zero(); xhat.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    dgamma[ch] += gd[i] * xh[i];
                    dbeta[ch] += gd[i];
                    dx[i] = gd[i] * gamma.data[ch] * inv_std[ch];
                }
            }
        }
        (
            Tensor::from_parts(xhat.shape.clone(), dx),
            Tensor::from_parts(vec![c], dgamma),
            Tensor::from_parts(vec![c], dbeta),
        )
    }
}
