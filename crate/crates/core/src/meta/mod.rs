//! Episode objectives, optimisation, training and checkpoints.

mod checkpoint;
mod config;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use config::{desk_config, preset, Benchmark, DataSource, MamlOrder, Method, ModelConfig, Preset, RunConfig, TrainConfig};
pub use model::{
    bind_for_inference, episode_forward, episode_loss, frozen_support_predictions, gradient_steps, hypermaml_update, predictive_probs, task_gradients,
    gaussian_from_point, EpisodeOutput, LossOptions, Model, Noise, Target,
};
pub use optim::{anneal_gamma, Adam, MultiStepLr};
pub use train::{train, validation_seed, EpochRecord, TrainReport};
