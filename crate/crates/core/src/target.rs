//! The classified model: a shared encoder plus a functional linear head.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{uniform_init, Bound, EncoderSpec, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "head/weight";
pub const HEAD_BIAS: &str = "head/bias";

/// Point-estimated universal weights θ = (θ^E, θ^H).
#[derive(Clone, Debug, PartialEq)]
pub struct UniversalWeights<S> {
    pub encoder: ParamSet<S>,
    /// `head/weight: [emb, n_way]`, `head/bias: [n_way]`.
    pub head: ParamSet<S>,
}

impl<S: Scalar> UniversalWeights<S> {
    pub fn init(spec: &EncoderSpec, n_way: usize, rng: &mut impl Rng) -> Result<Self> {
        let emb = spec.emb();
        let encoder = spec.init(rng)?;
        let mut head = ParamSet::new();
        head.insert(HEAD_WEIGHT, uniform_init(rng, &[emb, n_way], emb))?;
        head.insert(HEAD_BIAS, uniform_init(rng, &[n_way], emb))?;
        Ok(UniversalWeights { encoder, head })
    }

    pub fn emb(&self) -> Result<usize> {
        Ok(self.head.get(HEAD_WEIGHT)?.shape()[0])
    }

    pub fn n_way(&self) -> Result<usize> {
        Ok(self.head.get(HEAD_BIAS)?.len())
    }

    pub fn head_weights(&self) -> Result<HeadWeights<S>> {
        HeadWeights::from_parts(self.head.get(HEAD_WEIGHT)?, self.head.get(HEAD_BIAS)?)
    }

    /// Both groups in one set, encoder first.
    pub fn joined(&self) -> Result<ParamSet<S>> {
        let mut all = self.encoder.clone();
        all.extend(&self.head)?;
        Ok(all)
    }

    pub fn split(all: &ParamSet<S>) -> Self {
        UniversalWeights {
            encoder: all.subset("encoder/"),
            head: all.subset("head/"),
        }
    }
}

/// Flat head weights in class-major order: for each class `c`,
/// `weight[0..emb, c]` followed by `bias[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<S> {
    pub emb: usize,
    pub n_way: usize,
    pub flat: Vec<S>,
}

impl<S: Scalar> HeadWeights<S> {
    pub fn len_for(emb: usize, n_way: usize) -> usize {
        (emb + 1) * n_way
    }

    pub fn from_parts(weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Self> {
        let (emb, n_way) = weight.dims2("HeadWeights")?;
        if bias.shape() != [n_way] {
            return Err(Error::dim("HeadWeights", weight.shape(), bias.shape()));
        }
        let mut flat = Vec::with_capacity((emb + 1) * n_way);
        for c in 0..n_way {
            flat.extend((0..emb).map(|i| weight.at2(i, c)));
            flat.push(bias.data()[c]);
        }
        Ok(HeadWeights { emb, n_way, flat })
    }

    pub fn to_parts(&self) -> (Tensor<S>, Tensor<S>) {
        let (emb, n) = (self.emb, self.n_way);
        let mut w = vec![S::zero(); emb * n];
        let mut b = vec![S::zero(); n];
        for c in 0..n {
            for i in 0..emb {
                w[i * n + c] = self.flat[c * (emb + 1) + i];
            }
            b[c] = self.flat[c * (emb + 1) + emb];
        }
        (Tensor::from_parts(vec![emb, n], w), Tensor::vector(b))
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::vector(self.flat.clone())
    }
}

/// Differentiable class-major flattening of `(weight [emb, N], bias [N])`.
pub fn head_flat<'t, S: Scalar>(weight: Var<'t, S>, bias: Var<'t, S>) -> Result<Var<'t, S>> {
    let (emb, n) = weight.value().dims2("head_flat")?;
    if bias.shape() != [n] {
        return Err(Error::dim("head_flat", &weight.shape(), &bias.shape()));
    }
    Var::concat_rows(&[weight, bias.reshape([1, n])?])?
        .transpose()?
        .reshape([(emb + 1) * n])
}

/// Flat head of a bound universal-weight set.
pub fn bound_head_flat<'t, S: Scalar>(params: &Bound<'t, S>) -> Result<Var<'t, S>> {
    head_flat(params.get(HEAD_WEIGHT)?, params.get(HEAD_BIAS)?)
}

/// Linear logits `[B, N]` of embeddings `e: [B, emb]` under flat head `w`.
pub fn head_logits<'t, S: Scalar>(e: Var<'t, S>, w: Var<'t, S>, n_way: usize) -> Result<Var<'t, S>> {
    let (rows, emb) = e.value().dims2("head_logits")?;
    if w.shape() != [(emb + 1) * n_way] {
        return Err(Error::dim("head_logits", &[(emb + 1) * n_way], &w.shape()));
    }
    let ones = e.tape().constant(Tensor::ones([rows, 1]));
    let aug = Var::concat_cols(&[e, ones])?;
    aug.matmul(w.reshape([n_way, emb + 1])?.transpose()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::linear;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::from_f64([2, 3], &[1., 2., 3., -1., 0., 5.]).unwrap());
        let w = tape.constant(Tensor::zeros([4 * 4]));
        let p = head_logits(e, w, 4).unwrap().softmax().unwrap();
        assert!(p.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_computed_logits() {
        // emb = 2, N = 2; class 0 column (1, 2) bias 0.5, class 1 column (-1, 0) bias 1.
        let tape = Tape::new();
        let e = tape.constant(Tensor::from_f64([1, 2], &[3., 4.]).unwrap());
        let w = tape.constant(Tensor::vector(vec![1., 2., 0.5, -1., 0., 1.]));
        let l = head_logits(e, w, 2).unwrap();
        assert_eq!(l.value().data(), &[3. + 8. + 0.5, -3. + 1.]);
    }

    #[test]
    fn flat_head_matches_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = EncoderSpec::Mlp {
            input_dim: 3,
            hidden: 4,
            emb: 3,
        };
        let u = UniversalWeights::<f64>::init(&spec, 5, &mut rng).unwrap();
        let tape = Tape::new();
        let e = tape.constant(Tensor::from_f64([2, 3], &[0.3, -1., 2., 1., 1., 0.]).unwrap());
        let b = u.head.bind(&tape);
        let via_linear = linear(e, b.get(HEAD_WEIGHT).unwrap(), b.get(HEAD_BIAS).unwrap()).unwrap();
        let via_flat = head_logits(e, bound_head_flat(&b).unwrap(), 5).unwrap();
        let hw = tape.constant(u.head_weights().unwrap().to_tensor());
        let via_struct = head_logits(e, hw, 5).unwrap();
        for ((a, f), s) in via_linear.value().data().iter().zip(via_flat.value().data()).zip(via_struct.value().data()) {
            assert!((a - f).abs() < 1e-14 && (a - s).abs() < 1e-14);
        }
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::<f64>::zeros([1, 2]));
        let r = head_logits(e, tape.constant(Tensor::zeros([5])), 2);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn argmax_invariant_to_row_shift() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::from_f64([1, 2], &[0.7, -0.2]).unwrap());
        let w = [0.3, 1.0, 0.0, -0.5, 0.2, 0.1, 0.9, -0.9, 0.4];
        let shifted: Vec<f64> = w.iter().enumerate().map(|(i, &v)| if i % 3 == 2 { v + 10.0 } else { v }).collect();
        let argmax = |w: Vec<f64>| {
            let l = head_logits(e, tape.constant(Tensor::vector(w)), 3).unwrap().value();
            (0..3).max_by(|&a, &b| l.data()[a].total_cmp(&l.data()[b])).unwrap()
        };
        assert_eq!(argmax(w.to_vec()), argmax(shifted));
    }

    proptest! {
        #[test]
        fn head_roundtrip(emb in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = uniform_init::<f64>(&mut rng, &[emb, n], 1);
            let b = uniform_init::<f64>(&mut rng, &[n], 1);
            let h = HeadWeights::from_parts(&w, &b).unwrap();
            prop_assert_eq!(h.flat.len(), HeadWeights::<f64>::len_for(emb, n));
            let (w2, b2) = h.to_parts();
            prop_assert_eq!(&w2, &w);
            prop_assert_eq!(&b2, &b);
            let tape = Tape::new();
            let flat = head_flat(tape.constant(w), tape.constant(b)).unwrap();
            prop_assert_eq!(flat.value().to_vec(), h.flat);
        }
    }
}
