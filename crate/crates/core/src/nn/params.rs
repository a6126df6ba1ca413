//! Named parameter collections.

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, uniquely named tensors, e.g. `encoder/block0/conv/weight`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<S> {
    entries: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Replaces the value of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("ParamSet::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements.
    pub fn total_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<S> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Rebuilds a set with this set's names and shapes from a flat vector.
    pub fn unflatten(&self, flat: &[S]) -> Result<Self> {
        if flat.len() != self.total_count() {
            return Err(Error::dim("unflatten", &[self.total_count()], &[flat.len()]));
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for (name, t) in &self.entries {
            let n = t.len();
            out.insert(name.clone(), Tensor::new(t.shape(), flat[offset..offset + n].to_vec())?)?;
            offset += n;
        }
        Ok(out)
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Appends all entries of `other`; names must not collide.
    pub fn extend(&mut self, other: &ParamSet<S>) -> Result<()> {
        for (k, v) in other.iter() {
            self.insert(k, v.clone())?;
        }
        Ok(())
    }

    /// Overwrites entries present in both sets with `other`'s values.
    pub fn update_from(&mut self, other: &ParamSet<S>) -> Result<()> {
        for (k, v) in other.iter() {
            if self.contains(k) {
                self.set(k, v.clone())?;
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(&Tensor<S>) -> Tensor<S>) -> Self {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    /// Elementwise combination of two sets with identical layout.
    pub fn zip_map(&self, other: &ParamSet<S>, f: impl Fn(S, S) -> S) -> Result<Self> {
        let mut out = ParamSet::new();
        for ((k, a), (k2, b)) in self.entries.iter().zip(other.entries.iter()) {
            if k != k2 {
                return Err(Error::Contract(format!("parameter layout mismatch: {k} vs {k2}")));
            }
            out.insert(k.clone(), a.zip_with(b, "ParamSet::zip_map", &f)?)?;
        }
        if self.len() != other.len() {
            return Err(Error::dim("ParamSet::zip_map", &[self.len()], &[other.len()]));
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Records every entry as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Records every entry as a constant.
    pub fn bind_const<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Tape handles for a [`ParamSet`], by name.
#[derive(Clone, Debug, Default)]
pub struct Bound<'t, S> {
    vars: IndexMap<String, Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t, S>)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, S>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> Vec<Var<'t, S>> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, S>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Bound {
            vars: self
                .vars
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }

    pub fn merged(&self, other: &Bound<'t, S>) -> Self {
        let mut vars = self.vars.clone();
        for (k, v) in &other.vars {
            vars.insert(k.clone(), *v);
        }
        Bound { vars }
    }

    /// Current values as a [`ParamSet`].
    pub fn values(&self) -> ParamSet<S> {
        ParamSet {
            entries: self.vars.iter().map(|(k, v)| (k.clone(), v.value())).collect(),
        }
    }

    /// Gradients of `loss` for every entry, as a [`ParamSet`].
    pub fn gradients(&self, loss: Var<'t, S>) -> Result<ParamSet<S>> {
        let tape = loss.tape();
        let vars = self.vars();
        let grads = tape.grad(loss, &vars)?;
        Ok(ParamSet {
            entries: self.vars.keys().cloned().zip(grads).collect(),
        })
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` initialisation.
pub fn uniform_init<S: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("a/w", Tensor::matrix(2, 3, (0..6).map(f64::from).collect()).unwrap())
            .unwrap();
        p.insert("a/b", Tensor::vector(vec![7.0, 8.0, 9.0])).unwrap();
        p.insert("z", Tensor::scalar(-1.0)).unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p.insert("z", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn total_count_sums_elements() {
        assert_eq!(sample().total_count(), 10);
    }

    #[test]
    fn subset_keeps_order() {
        let s = sample().subset("a/");
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a/w", "a/b"]);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_a_bijection(values in proptest::collection::vec(-1e6f64..1e6, 10)) {
            let layout = sample();
            let p = layout.unflatten(&values).unwrap();
            prop_assert_eq!(p.flatten(), values.clone());
            prop_assert_eq!(p.names().collect::<Vec<_>>(), layout.names().collect::<Vec<_>>());
            prop_assert_eq!(layout.unflatten(&p.flatten()).unwrap(), p);
        }
    }
}
