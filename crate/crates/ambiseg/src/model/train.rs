//! Training loop: sample a batch, compute the weighted diffusion loss,
//! backpropagate, clip the global gradient norm, step AdamW.
//!
//! The schedule holds the learning rate constant and then decays it with a
//! cosine over the final fraction of steps. A single ChaCha stream drives
//! batch assembly and the loss-internal draws, so a run is reproducible
//! from (seed, step count) and resumable from (seed, stream position).

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::ExperimentConfig;
use crate::data::{Dataset, ANNOTATORS};
use crate::diffusion::training_loss;
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, TrainState};
use crate::model::DenoiserModel;
use crate::schedule::{LossWeighting, NoiseSchedule};
use crate::tensor::optim::{adamw_step, clip_grad_norm, AdamWState};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Total step count the run targets (resumed runs continue toward it).
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Fraction of total steps under cosine learning-rate decay at the end.
    pub decay_frac: f64,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        TrainOptions {
            steps: cfg.train.steps,
            batch_size: cfg.train.batch_size,
            lr: cfg.train.lr,
            clip_norm: cfg.train.clip_norm,
            decay_frac: cfg.train.decay_frac,
            checkpoint_every: (cfg.train.checkpoint_every > 0)
                .then_some(cfg.train.checkpoint_every),
            checkpoint_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Learning rate at a 0-based step index.
pub fn lr_at(step: u64, total: u64, lr0: f64, decay_frac: f64) -> f64 {
    let decay_steps = (total as f64 * decay_frac.clamp(0.0, 1.0)).round() as u64;
    if decay_steps == 0 || total == 0 {
        return lr0;
    }
    let start = total.saturating_sub(decay_steps);
    if step < start {
        lr0
    } else {
        let progress = (step - start) as f64 / decay_steps as f64;
        lr0 * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Run (or continue) training until `opts.steps` optimizer steps have been
/// taken. Returns one loss row per executed step.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut DenoiserModel,
    dataset: &Dataset,
    sched: &NoiseSchedule,
    lw: &LossWeighting,
    adamw: &mut AdamWState<f32>,
    rng: &mut ChaCha12Rng,
    opts: &TrainOptions,
    experiment: Option<&ExperimentConfig>,
) -> Result<Vec<LossRow>> {
    if dataset.is_empty() {
        return Err(Error::Usage("training needs a non-empty dataset".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }

    let mut rows = Vec::new();
    let mut write_checkpoint = |model: &DenoiserModel,
                                adamw: &AdamWState<f32>,
                                rng: &ChaCha12Rng|
     -> Result<()> {
        if let (Some(path), Some(exp)) = (&opts.checkpoint_path, experiment) {
            let state = TrainState {
                model: DenoiserModel {
                    config: model.config.clone(),
                    params: model.params.clone(),
                },
                adamw: adamw.clone(),
                rng_word_pos: rng.get_word_pos(),
            };
            checkpoint::save(path, exp, &state)?;
        }
        Ok(())
    };

    while adamw.step < opts.steps {
        let step = adamw.step; // 0-based index of the step about to run
        let lr = lr_at(step, opts.steps, opts.lr, opts.decay_frac);

        let picks: Vec<(usize, usize)> = (0..opts.batch_size)
            .map(|_| {
                (
                    rng.gen_range(0..dataset.len()),
                    rng.gen_range(0..ANNOTATORS),
                )
            })
            .collect();
        let batch = dataset.stack_batch(&picks)?;
        let loss = training_loss(model, &batch, sched, lw, rng)?;
        let loss_value = loss.item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became non-finite at step {step}; last checkpoint retained"
            )));
        }

        model.zero_grads();
        loss.backward()?;
        clip_grad_norm(&model.params, opts.clip_norm)?;
        adamw.lr = lr;
        adamw_step(&mut model.params, adamw)?;

        rows.push(LossRow {
            step: adamw.step,
            loss: loss_value,
            lr,
        });

        if let Some(every) = opts.checkpoint_every {
            if every > 0 && adamw.step % every == 0 && adamw.step < opts.steps {
                write_checkpoint(model, adamw, rng)?;
            }
        }
    }
    write_checkpoint(model, adamw, rng)?;
    Ok(rows)
}
