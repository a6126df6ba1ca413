use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episodes::{load_image_dataset, make_synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::hypernet::{HyperKind, HyperSpec};
use crate::nn::EncoderSpec;
use crate::posteriors::{FlowSpec, TraceMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Maml,
    Hypermaml,
    BhmamlG,
    BhmamlCnf,
}

impl Method {
    pub fn hyper_kind(self) -> Option<HyperKind> {
        match self {
            Method::Maml => None,
            Method::Hypermaml => Some(HyperKind::Point),
            Method::BhmamlG => Some(HyperKind::Gaussian),
            Method::BhmamlCnf => Some(HyperKind::Cnf),
        }
    }

    /// Whether predictions vary across posterior draws.
    pub fn is_bayesian(self) -> bool {
        matches!(self, Method::BhmamlG | Method::BhmamlCnf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Maml => "maml",
            Method::Hypermaml => "hypermaml",
            Method::BhmamlG => "bhmaml_g",
            Method::BhmamlCnf => "bhmaml_cnf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MamlOrder {
    /// Adaptation Jacobian treated as identity.
    First,
    /// Differentiates through the inner gradient steps.
    Second,
}

/// Optimisation and episode settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub n_way: usize,
    pub k_shot: usize,
    /// Query examples per class.
    pub n_query: usize,
    /// Posterior draws per episode during training.
    pub p_samples: usize,
    pub gamma_max: f64,
    /// Length of the linear γ ramp; defaults to the first milestone.
    pub gamma_warmup_epochs: Option<usize>,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub tasks_per_batch: usize,
    /// MAML inner step size α.
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub maml_order: MamlOrder,
    /// Adapt encoder weights too in the MAML inner loop.
    pub maml_adapt_all: bool,
    pub val_episodes: usize,
    /// Draws per episode at evaluation; defaults to `p_samples`.
    pub p_eval: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::BhmamlG,
            n_way: 5,
            k_shot: 1,
            n_query: 5,
            p_samples: 5,
            gamma_max: 1e-4,
            gamma_warmup_epochs: None,
            lr: 1e-3,
            milestones: Vec::new(),
            lr_decay: 0.3,
            epochs: 10,
            episodes_per_epoch: 100,
            tasks_per_batch: 4,
            inner_lr: 0.01,
            inner_steps: 5,
            maml_order: MamlOrder::First,
            maml_adapt_all: false,
            val_episodes: 100,
            p_eval: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup_epochs(&self) -> usize {
        self.gamma_warmup_epochs
            .unwrap_or_else(|| self.milestones.first().copied().unwrap_or(0))
    }

    pub fn p_eval(&self) -> usize {
        self.p_eval.unwrap_or(self.p_samples)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_way < 2 || self.k_shot == 0 || self.n_query == 0 {
            return fail("episodes need n_way >= 2, k_shot >= 1 and n_query >= 1");
        }
        if self.p_samples == 0 || self.p_eval == Some(0) {
            return fail("p_samples and p_eval must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return fail("need lr > 0 and 0 < lr_decay < 1");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("milestones must be strictly increasing");
        }
        if !(self.gamma_max >= 0.0) {
            return fail("gamma_max must be non-negative");
        }
        if self.epochs == 0 || self.tasks_per_batch == 0 || self.episodes_per_epoch < self.tasks_per_batch {
            return fail("need epochs >= 1 and episodes_per_epoch >= tasks_per_batch >= 1");
        }
        if self.method == Method::Maml && (self.inner_steps == 0 || !(self.inner_lr >= 0.0)) {
            return fail("MAML needs inner_steps >= 1 and inner_lr >= 0");
        }
        Ok(())
    }
}

/// Network sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub hyper: HyperSpec,
    #[serde(default)]
    pub flow: FlowSpec,
}

/// Where the episodes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Root of a `{train,val,test}/<class>/<example>` tree.
    Directory(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset<f64>> {
        match self {
            DataSource::Synthetic(spec) => make_synthetic(spec),
            DataSource::Directory(root) => load_image_dataset(root),
        }
    }
}

/// Complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataSource,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.encoder.validate()?;
        if self.train.method == Method::BhmamlCnf {
            self.model.flow.validate()?;
        }
        if self.model.hyper.hidden == 0 || self.model.hyper.c_dim == 0 {
            return Err(Error::Config("hypernetwork widths must be positive".into()));
        }
        Ok(())
    }

    /// Checks that the dataset fits the encoder.
    pub fn check_dataset(&self, d: &Dataset<f64>) -> Result<()> {
        if d.input_len() != self.model.encoder.input_len() {
            return Err(Error::Config(format!(
                "dataset examples have {} values but the encoder expects {}",
                d.input_len(),
                self.model.encoder.input_len()
            )));
        }
        Ok(())
    }
}

/// Benchmarks with published hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Benchmark {
    Cub,
    MiniImagenet,
    MiniImagenetToCub,
    OmniglotToEmnist,
}

/// Published settings for one benchmark and method.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub lr: f64,
    pub hyper_width: usize,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub gamma_max: f64,
    pub p_samples: usize,
}

/// Reference hyperparameters of the Bayesian variants (`k_shot` 1 or 5).
pub fn preset(bench: Benchmark, k_shot: usize, method: Method) -> Result<Preset> {
    use Benchmark::*;
    let col = match bench {
        Cub => 0,
        MiniImagenet => 1,
        MiniImagenetToCub => 2,
        OmniglotToEmnist => 3,
    };
    let (lr, width, gamma, p): ([f64; 4], [usize; 4], [f64; 4], [usize; 4]) = match (method, k_shot) {
        (Method::BhmamlG, 1) => ([0.01, 0.001, 0.001, 0.01], [512, 256, 256, 512], [1e-4, 1e-4, 1e-5, 1e-3], [5, 7, 5, 5]),
        (Method::BhmamlG, 5) => ([0.001, 0.001, 0.001, 0.01], [256, 256, 256, 512], [1e-5, 1e-5, 1e-4, 1e-3], [5; 4]),
        (Method::BhmamlCnf, 1) => ([0.001; 4], [512, 256, 256, 512], [1e-6, 1e-6, 1e-6, 1e-4], [5; 4]),
        (Method::BhmamlCnf, 5) => ([0.001; 4], [256, 256, 256, 512], [1e-6; 4], [5; 4]),
        _ => {
            return Err(Error::Config(format!(
                "no preset for {} with {k_shot} shots",
                method.as_str()
            )))
        }
    };
    let long = bench == OmniglotToEmnist;
    let milestones = match (method, k_shot, bench) {
        (_, _, OmniglotToEmnist) => vec![51, 550],
        (Method::BhmamlG | Method::BhmamlCnf, 1, Cub) => vec![51, 550],
        _ => vec![101, 1100],
    };
    Ok(Preset {
        lr: lr[col],
        hyper_width: width[col],
        epochs: if long { 2048 } else { 4000 },
        milestones,
        gamma_max: gamma[col],
        p_samples: p[col],
    })
}

/// Desk-scale 5-way 1-shot run on 16-dimensional blobs (400 classes,
/// spread 0.1, separation 4). Trains in seconds to minutes on one core.
pub fn desk_config(method: Method) -> RunConfig {
    let cnf = method == Method::BhmamlCnf;
    RunConfig {
        train: TrainConfig {
            method,
            n_way: 5,
            k_shot: 1,
            n_query: 5,
            p_samples: 5,
            gamma_max: 1e-4,
            lr: if cnf { 3e-3 } else { 1e-3 },
            milestones: vec![40],
            epochs: 60,
            episodes_per_epoch: 100,
            tasks_per_batch: 4,
            inner_lr: 0.5,
            inner_steps: 5,
            val_episodes: 100,
            seed: 1,
            ..TrainConfig::default()
        },
        model: ModelConfig {
            encoder: EncoderSpec::Mlp {
                input_dim: 16,
                hidden: 32,
                emb: if cnf { 8 } else { 16 },
            },
            hyper: HyperSpec {
                hidden: 64,
                c_dim: 64,
                zero_init_final: false,
            },
            flow: FlowSpec {
                hidden: 64,
                steps: 4,
                t_prior: 0.1,
                trace: TraceMode::Analytic,
            },
        },
        data: DataSource::Synthetic(SyntheticSpec::blobs(400, 16, 30, 0.1, 7)),
    }
}
