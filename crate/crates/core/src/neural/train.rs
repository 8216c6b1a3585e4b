//! Minibatch training of a single network with early stopping.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::slstm::{Sample, SlstmConfig, SlstmParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub params: SlstmParams,
    /// 1-based epoch the returned weights come from.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    /// Mean minibatch loss per epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

impl TrainOutcome {
    pub fn stopped_early(&self, config: &TrainConfig) -> bool {
        self.epochs_run < config.max_epochs
    }
}

/// Train one network from a seeded initialization.
///
/// The result is a pure function of `(train, val, arch, config, seed)`: the
/// same seed drives initialization and the per-epoch shuffles.
pub fn train_member(
    train: &[Sample],
    val: &[Sample],
    arch: &SlstmConfig,
    config: &TrainConfig,
    levels: &[f64],
    seed: u64,
) -> Result<TrainOutcome> {
    arch.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!(
            "training needs samples: {} train, {} validation",
            train.len(),
            val.len()
        )));
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::Invalid("batch size and max epochs must be positive".into()));
    }
    if levels.len() != arch.n_quantiles {
        return Err(Error::Shape(format!("{} levels for {} heads", levels.len(), arch.n_quantiles)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = SlstmParams::init(arch.clone(), &mut rng);
    for s in train.iter().chain(val) {
        params.check_sample(s, true)?;
    }
    let mut grads = SlstmParams::zeros(arch.clone());
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::new(config.adam, sizes);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut since_best = 0usize;
    let mut train_hist = Vec::new();
    let mut val_hist = Vec::new();
    let mut batch: Vec<Sample> = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train[i].clone()));
            for t in grads.tensors_mut() {
                t.iter_mut().for_each(|g| *g = 0.0);
            }
            let loss = params.loss_and_gradient(&batch, levels, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("minibatch loss {loss}"),
                });
            }
            epoch_loss += loss * idx.len() as f64;
            let grad_views: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params.tensors_mut(), &grad_views, &mut adam)
                .map_err(|e| Error::Diverged { epoch, detail: e.to_string() })?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = params.loss(val, levels)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        train_hist.push(train_loss);
        val_hist.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let epochs_run = train_hist.len();
    Ok(TrainOutcome {
        params: best.1,
        best_epoch: best.2,
        best_val_loss: best.0,
        epochs_run,
        train_loss: train_hist,
        val_loss: val_hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::tensor::Tensor2;
    use crate::neural::slstm::{LONG_WINDOW, SHORT_WINDOW};
    use rand::Rng;

    fn tiny(horizon: usize) -> SlstmConfig {
        SlstmConfig {
            input_dim: 3,
            lstm_widths: vec![4, 4, 4, 4],
            dense_width: 4,
            horizon,
            n_quantiles: 3,
        }
    }

    fn random_samples(n: usize, horizon: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Sample {
                x_short: Tensor2::uniform(SHORT_WINDOW, 3, 1.0, &mut rng),
                x_long: Tensor2::uniform(LONG_WINDOW, 3, 1.0, &mut rng),
                target: (0..horizon).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    const LEVELS: [f64; 3] = [0.1, 0.5, 0.9];

    #[test]
    fn same_seed_gives_identical_weights() {
        let train = random_samples(40, 2, 1);
        let val = random_samples(8, 2, 2);
        let cfg = TrainConfig { max_epochs: 3, batch_size: 16, ..TrainConfig::default() };
        let a = train_member(&train, &val, &tiny(2), &cfg, &LEVELS, 11).unwrap();
        let b = train_member(&train, &val, &tiny(2), &cfg, &LEVELS, 11).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.train_loss, b.train_loss);
        let c = train_member(&train, &val, &tiny(2), &cfg, &LEVELS, 12).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn flat_validation_triggers_early_stop() {
        // Validation targets are pure noise unrelated to the inputs, so the
        // validation loss stalls while training continues.
        let train = random_samples(32, 2, 3);
        let val = random_samples(32, 2, 4);
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 3,
            batch_size: 32,
            adam: AdamConfig { lr: 0.05, ..AdamConfig::default() },
        };
        let out = train_member(&train, &val, &tiny(2), &cfg, &LEVELS, 5).unwrap();
        assert!(out.stopped_early(&cfg), "ran {} epochs", out.epochs_run);
        assert_eq!(out.epochs_run, out.best_epoch + cfg.patience);
        let best = out.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, best);
    }

    #[test]
    fn rejects_empty_sets_and_bad_targets() {
        let train = random_samples(4, 2, 1);
        let cfg = TrainConfig::default();
        assert!(train_member(&train, &[], &tiny(2), &cfg, &LEVELS, 0).is_err());
        assert!(train_member(&train, &train, &tiny(3), &cfg, &LEVELS, 0).is_err());
    }
}
