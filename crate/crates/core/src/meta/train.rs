use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::RunConfig;
use super::model::{task_gradients, LossOptions, Model, Noise};
use super::optim::{anneal_gamma, Adam, MultiStepLr};
use crate::episodes::{sample_episode, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::nn::update_running;
use crate::parallel::map_indexed;

/// Offset mixed into the seed of validation episodes so they never share
/// a stream with training tasks.
const VAL_SEED_SALT: u64 = 0x5eed_0f_7a11;

/// Seed of the fixed validation episodes of a run.
pub fn validation_seed(cfg: &RunConfig) -> u64 {
    cfg.train.seed ^ VAL_SEED_SALT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based index of the finished epoch.
    pub epoch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_ci95: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub last: Checkpoint,
    /// Checkpoint with the highest validation accuracy (earliest on ties).
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Meta-trains a fresh model.
///
/// Every optimizer step samples `tasks_per_batch` training episodes, each
/// from its own generator seeded by the run's master generator, averages
/// their gradients in task order and takes one Adam step on all
/// parameters. After each epoch the model is scored on fixed validation
/// episodes; with `out_dir` set, `last.bhml` and `best.bhml` are written
/// there. A non-finite loss aborts the run after writing `diverged.bhml`.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset<f64>,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    cfg.check_dataset(dataset)?;
    let t = &cfg.train;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut model = Model::init(cfg, &mut rng)?;
    let mut adam = Adam::new(&model.params);
    let schedule = MultiStepLr::from_config(t);
    let batches = t.episodes_per_epoch / t.tasks_per_batch;
    let mut history = Vec::with_capacity(t.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut step = 0usize;

    for epoch in 0..t.epochs {
        let lr = schedule.lr(epoch);
        let gamma = anneal_gamma(epoch, t);
        let opts = LossOptions::train(gamma);
        let mut loss_sum = 0.0;
        for _ in 0..batches {
            let seeds: Vec<u64> = (0..t.tasks_per_batch).map(|_| rng.random()).collect();
            let results = map_indexed(seeds.len(), |i| {
                let mut task_rng = ChaCha8Rng::seed_from_u64(seeds[i]);
                let ep = sample_episode(dataset, Split::Train, t.n_way, t.k_shot, t.n_query, &mut task_rng)?;
                let noise = Noise::draw(cfg, t.p_samples, &mut task_rng);
                task_gradients(cfg, &model, &ep, &opts, &noise)
            })?;
            let scale = 1.0 / results.len() as f64;
            let mut total = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for (loss, grads, stats) in &results {
                batch_loss += loss * scale;
                total = total.zip_map(grads, |a, g| a + g * scale)?;
                update_running(&mut model.running, stats)?;
            }
            if !batch_loss.is_finite() || !total.all_finite() {
                let snapshot = snapshot(cfg, epoch, &model, &adam, &rng, None, None);
                if let Some(dir) = out_dir {
                    snapshot.save(dir.join("diverged.bhml"))?;
                }
                return Err(Error::Numerical {
                    step,
                    message: format!("non-finite loss {batch_loss} in epoch {}", epoch + 1),
                });
            }
            adam.step(&mut model.params, &total, lr)?;
            loss_sum += batch_loss;
            step += 1;
        }

        let val = evaluate(
            cfg,
            &model,
            dataset,
            &EvalOptions {
                split: Split::Val,
                n_episodes: t.val_episodes,
                p_eval: t.p_eval(),
                seed: validation_seed(cfg),
                adapt: None,
            },
        )?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            gamma,
            train_loss: loss_sum / batches.max(1) as f64,
            val_accuracy: val.accuracy_mean,
            val_ci95: val.ci95,
        };
        on_epoch(&record);
        let improved = best
            .as_ref()
            .is_none_or(|b| record.val_accuracy > b.val_accuracy.unwrap_or(f64::NEG_INFINITY));
        let best_acc = if improved {
            record.val_accuracy
        } else {
            best.as_ref().and_then(|b| b.val_accuracy).unwrap_or(record.val_accuracy)
        };
        let ckpt = snapshot(cfg, epoch + 1, &model, &adam, &rng, Some(record.val_accuracy), Some(best_acc));
        history.push(record);
        if let Some(dir) = out_dir {
            ckpt.save(dir.join("last.bhml"))?;
            if improved {
                ckpt.save(dir.join("best.bhml"))?;
            }
        }
        if improved {
            best = Some(ckpt);
        }
    }

    let last = snapshot(
        cfg,
        t.epochs,
        &model,
        &adam,
        &rng,
        history.last().map(|r| r.val_accuracy),
        best.as_ref().and_then(|b| b.val_accuracy),
    );
    Ok(TrainReport {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        history,
    })
}

fn snapshot(
    cfg: &RunConfig,
    epoch: usize,
    model: &Model,
    adam: &Adam,
    rng: &ChaCha8Rng,
    val: Option<f64>,
    best: Option<f64>,
) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        epoch,
        model: model.clone(),
        adam: Some(adam.clone()),
        rng: RngState::capture(rng),
        val_accuracy: val,
        best_val_accuracy: best,
    }
}
