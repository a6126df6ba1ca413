//! Datasets, class splits and N-way K-shot episode sampling.

mod io;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{load_image_dataset, write_csv_dataset};
pub use synthetic::{make_synthetic, SyntheticKind, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

/// One class: a name, the split it belongs to, and its examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassData<S> {
    pub name: String,
    pub split: Split,
    pub examples: Vec<Vec<S>>,
}

/// Immutable collection of classes partitioned into train/val/test.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    input_shape: Vec<usize>,
    classes: Vec<ClassData<S>>,
}

impl<S: Scalar> Dataset<S> {
    /// Class ids are positions in `classes`. Every example must have
    /// `product(input_shape)` values and every class at least one example.
    pub fn new(input_shape: Vec<usize>, classes: Vec<ClassData<S>>) -> Result<Self> {
        let len: usize = input_shape.iter().product();
        for c in &classes {
            if c.examples.is_empty() {
                return Err(Error::Capacity(format!("class {} has no examples", c.name)));
            }
            if let Some(bad) = c.examples.iter().find(|e| e.len() != len) {
                return Err(Error::dim("Dataset::new", &input_shape, &[bad.len()]));
            }
        }
        Ok(Dataset { input_shape, classes })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn classes(&self) -> &[ClassData<S>] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Global ids of the classes in `split`, ascending.
    pub fn split_classes(&self, split: Split) -> Vec<usize> {
        (0..self.classes.len()).filter(|&c| self.classes[c].split == split).collect()
    }

    pub fn example(&self, class: usize, index: usize) -> &[S] {
        &self.classes[class].examples[index]
    }

    /// All examples of a split as `(global class, example index)` pairs.
    pub fn split_examples(&self, split: Split) -> Vec<(usize, usize)> {
        self.split_classes(split)
            .into_iter()
            .flat_map(|c| (0..self.classes[c].examples.len()).map(move |i| (c, i)))
            .collect()
    }

    /// Stacks the given examples into a `[n, input_len]` tensor.
    pub fn gather(&self, refs: &[(usize, usize)]) -> Tensor<S> {
        let mut data = Vec::with_capacity(refs.len() * self.input_len());
        for &(c, i) in refs {
            data.extend_from_slice(self.example(c, i));
        }
        Tensor::from_parts(vec![refs.len(), self.input_len()], data)
    }
}

/// One N-way K-shot task.
///
/// Support rows are grouped by local class (`K` rows per class, local class
/// `0` first); query rows likewise with `n_query` per class.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEpisode<S> {
    pub n_way: usize,
    pub k_shot: usize,
    pub support_x: Tensor<S>,
    pub support_y: Vec<usize>,
    pub query_x: Tensor<S>,
    pub query_y: Vec<usize>,
    /// Local label → global class id, ascending.
    pub class_map: Vec<usize>,
    /// `(global class, example index)` of every support row.
    pub support_refs: Vec<(usize, usize)>,
    /// `(global class, example index)` of every query row.
    pub query_refs: Vec<(usize, usize)>,
}

impl<S: Scalar> TaskEpisode<S> {
    /// Inverse of `class_map`.
    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.class_map.binary_search(&global).ok()
    }

    /// Same task with `query_x` replaced, labels kept.
    pub fn with_query(&self, query_x: Tensor<S>) -> Self {
        TaskEpisode {
            query_x,
            ..self.clone()
        }
    }
}

/// Draws `n_way` classes of `split` without replacement and, per class,
/// `k_shot + n_query` distinct examples.
pub fn sample_episode<S: Scalar>(
    d: &Dataset<S>,
    split: Split,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut impl Rng,
) -> Result<TaskEpisode<S>> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Config("n_way and k_shot must be positive".into()));
    }
    let pool = d.split_classes(split);
    if pool.len() < n_way {
        return Err(Error::Capacity(format!(
            "split {split} has {} classes, episode needs {n_way}",
            pool.len()
        )));
    }
    let need = k_shot + n_query;
    if let Some(&c) = pool.iter().find(|&&c| d.classes[c].examples.len() < need) {
        return Err(Error::Capacity(format!(
            "class {} has {} examples, episode needs {need}",
            d.classes[c].name,
            d.classes[c].examples.len()
        )));
    }
    let mut class_map: Vec<usize> = sample(rng, pool.len(), n_way).into_iter().map(|i| pool[i]).collect();
    class_map.sort_unstable();

    let mut support_refs = Vec::with_capacity(n_way * k_shot);
    let mut query_refs = Vec::with_capacity(n_way * n_query);
    let mut support_y = Vec::with_capacity(n_way * k_shot);
    let mut query_y = Vec::with_capacity(n_way * n_query);
    for (local, &c) in class_map.iter().enumerate() {
        let picks = sample(rng, d.classes[c].examples.len(), need).into_vec();
        for &i in &picks[..k_shot] {
            support_refs.push((c, i));
            support_y.push(local);
        }
        for &i in &picks[k_shot..] {
            query_refs.push((c, i));
            query_y.push(local);
        }
    }
    Ok(TaskEpisode {
        n_way,
        k_shot,
        support_x: d.gather(&support_refs),
        support_y,
        query_x: d.gather(&query_refs),
        query_y,
        class_map,
        support_refs,
        query_refs,
    })
}
