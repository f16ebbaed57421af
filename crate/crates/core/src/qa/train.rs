use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Mode, Tape, Var};

use super::{evaluate, loss, CamseModel, QaInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds shuffling and dropout; set from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 10,
            adam: AdamConfig::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.decay > 0.0 && a.epsilon > 0.0) {
            return Err(Error::Config("train.adam learning_rate, decay and epsilon must be positive".into()));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config("train.adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev_accuracy: Option<f64>,
}

/// Minibatch Adam over candidate cross-entropy. On return `model` holds the
/// parameters of the epoch with the best dev accuracy (earliest on ties), or
/// of the last epoch when `dev` is empty. `on_epoch` sees each epoch's metrics.
pub fn train(
    model: &mut CamseModel,
    train: &[QaInstance],
    dev: &[QaInstance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    for inst in train.iter().chain(dev) {
        inst.gold()?;
    }
    let mut adam = Adam::new(config.adam.clone(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, Option<f64>, crate::numerics::ParamStore)> = None;

    for epoch in 0..config.epochs {
        adam.set_epoch(epoch as u32);
        let lr = adam.learning_rate();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            model.store.zero_grads();
            for &i in batch {
                let inst = &train[i];
                let tape = Tape::new();
                let scores: Vec<Var<'_>> = model
                    .instance_scores(&tape, inst, Mode::Train, &mut rng)?
                    .iter()
                    .map(|c| c.score)
                    .collect();
                let l = loss(&tape, &scores, inst.gold()?)?;
                if !l.item().is_finite() {
                    return Err(Error::Divergence { epoch: epoch + 1, batch: batch_no + 1 });
                }
                epoch_loss += l.item();
                let grads = tape.backward(l)?;
                grads.accumulate_into(&mut model.store, 1.0 / batch.len() as f64);
            }
            adam.step(&mut model.store)?;
        }
        let dev_accuracy = if dev.is_empty() {
            None
        } else {
            Some(evaluate(model, dev)?.accuracy)
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss: epoch_loss / train.len() as f64,
            dev_accuracy,
            lr,
        };
        log::info!(
            "epoch {} loss {:.6} dev {:?} lr {:.3e}",
            metrics.epoch,
            metrics.train_loss,
            metrics.dev_accuracy,
            lr
        );
        on_epoch(&metrics)?;
        let improved = match &best {
            None => true,
            Some((_, prev, _)) => match (dev_accuracy, prev) {
                (Some(a), Some(p)) => a > *p,
                _ => true,
            },
        };
        if improved {
            best = Some((epoch + 1, dev_accuracy, model.store.clone()));
        }
        history.push(metrics);
    }
    let (best_epoch, best_dev_accuracy, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainReport {
        history,
        best_epoch,
        best_dev_accuracy,
    })
}
