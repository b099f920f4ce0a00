use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{predict, triplet_loss, Bound, ModelParameters};
use super::{ModelConfig, ScnError};
use crate::mcd::TrainingView;
use crate::rng::{derive_seed, seeded, tag};
use crate::scene::CountingTriplet;
use crate::tensor::{adam_step, backward, AdamConfig, LrSchedule, OptimizerState, Tape, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `lr_interval` epochs from `lr_start_epoch` on.
    pub lr_decay: f64,
    pub lr_interval: usize,
    pub lr_start_epoch: usize,
    /// Draw each training example by first picking a count label uniformly.
    pub uniform_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 32,
            learning_rate: 3e-3,
            lr_decay: 0.25,
            lr_interval: 2,
            lr_start_epoch: 10,
            uniform_labels: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScnError> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_interval == 0 {
            return Err(ScnError::Config(
                "epochs, batch_size and lr_interval must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ScnError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(ScnError::Config(format!("lr decay {} outside (0, 1]", self.lr_decay)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.learning_rate,
            decay: self.lr_decay,
            interval: self.lr_interval,
            start_epoch: self.lr_start_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean training objective over the epoch's batches.
    pub train_loss: f64,
    /// Mean `(ĉ - c)²`; zero for softmax heads.
    pub train_mse: f64,
    /// Mean per-instance entropy term; logged whatever λ is, zero for softmax heads.
    pub train_entropy: f64,
    pub val_accuracy: f64,
    /// Binary entropy averaged over every validation region.
    pub val_region_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept: highest validation accuracy, the
    /// earliest on ties.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainingHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: ModelParameters,
    pub history: TrainingHistory,
}

fn binary_entropy(s: f64) -> f64 {
    -(s * s.ln() + (1.0 - s) * (1.0 - s).ln())
}

/// Validation accuracy in percent and pooled per-region entropy.
fn validate(model: &ModelParameters, set: &[&CountingTriplet]) -> Result<(f64, f64), ScnError> {
    let (mut correct, mut h, mut regions) = (0usize, 0.0, 0usize);
    for t in set {
        let p = predict(t, model)?;
        correct += usize::from(p.label == t.count);
        if let Some(s) = p.scores {
            h += s.scores.iter().map(|&c| binary_entropy(c)).sum::<f64>();
            regions += s.scores.len();
        }
    }
    let entropy = if regions > 0 { h / regions as f64 } else { 0.0 };
    Ok((100.0 * correct as f64 / set.len() as f64, entropy))
}

/// Order of training examples for one epoch.
fn epoch_order(train: &[&CountingTriplet], uniform: bool, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = seeded(derive_seed(seed, epoch as u64));
    if !uniform {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        return order;
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in train.iter().enumerate() {
        buckets.entry(t.count).or_default().push(i);
    }
    let buckets: Vec<Vec<usize>> = buckets.into_values().collect();
    (0..train.len())
        .map(|_| {
            let b = &buckets[rng.random_range(0..buckets.len())];
            b[rng.random_range(0..b.len())]
        })
        .collect()
}

fn non_finite(e: ScnError, epoch: usize, batch: usize) -> ScnError {
    match e {
        ScnError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. }) => {
            ScnError::NonFiniteLoss { epoch, batch }
        }
        other => other,
    }
}

/// Mini-batch Adam on the mean per-triplet loss. Validation accuracy is
/// measured after every epoch and the best epoch's parameters are returned.
/// Only the training view is visible here, never the test set.
pub fn train(
    view: &TrainingView,
    config: &ModelConfig,
    trainer: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel, ScnError> {
    config.validate()?;
    trainer.validate()?;
    if view.train.is_empty() || view.validation.is_empty() {
        return Err(ScnError::Input("train and validation sets must be non-empty".into()));
    }
    let mut model = ModelParameters::init(config, derive_seed(seed, tag("model")))?;
    for t in view.train.iter().chain(&view.validation) {
        model.check_input(t)?;
        if config.head.is_softmax() && t.count > config.max_label {
            return Err(ScnError::Input(format!(
                "label {} exceeds max_label {}",
                t.count, config.max_label
            )));
        }
    }
    let mut state = OptimizerState::new(model.params(), trainer.schedule(), AdamConfig::default());
    let order_seed = derive_seed(seed, tag("order"));
    let mut best: Option<(f64, usize, ModelParameters)> = None;
    let mut epochs = Vec::with_capacity(trainer.epochs);
    let mut batch_id = 0;

    for epoch in 0..trainer.epochs {
        state.set_epoch(epoch);
        let order = epoch_order(&view.train, trainer.uniform_labels, order_seed, epoch);
        let (mut sum_loss, mut sum_mse, mut sum_h) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(trainer.batch_size) {
            let step = || -> Result<_, ScnError> {
                let mut tape = Tape::new();
                let vars = model.params().register(&mut tape);
                let b = Bound::new(&model, &vars);
                let (mut mse, mut h) = (0.0, 0.0);
                let mut acc = None;
                for &i in chunk {
                    let lv = triplet_loss(&mut tape, &b, &model, view.train[i])?;
                    mse += lv.mse.map_or(0.0, |v| tape.value(v).item());
                    h += lv.entropy.map_or(0.0, |v| tape.value(v).item());
                    acc = Some(match acc {
                        None => lv.total,
                        Some(a) => tape.add(a, lv.total)?,
                    });
                }
                let mean = tape.scale(acc.expect("non-empty chunk"), 1.0 / chunk.len() as f64)?;
                let loss = tape.value(mean).item();
                let grads = backward(&tape, mean)?;
                Ok((loss, mse, h, grads))
            };
            let (loss, mse, h, grads) = step().map_err(|e| non_finite(e, epoch, batch_id))?;
            if !loss.is_finite() {
                return Err(ScnError::NonFiniteLoss { epoch, batch: batch_id });
            }
            adam_step(model.params_mut(), &grads, &mut state, batch_id)
                .map_err(|e| non_finite(e.into(), epoch, batch_id))?;
            sum_loss += loss * chunk.len() as f64;
            sum_mse += mse;
            sum_h += h;
            batch_id += 1;
        }
        let n = order.len() as f64;
        let (val_accuracy, val_region_entropy) = validate(&model, &view.validation)?;
        epochs.push(EpochRecord {
            epoch,
            learning_rate: state.current_rate(),
            train_loss: sum_loss / n,
            train_mse: sum_mse / n,
            train_entropy: sum_h / n,
            val_accuracy,
            val_region_entropy,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, model.clone()));
        }
    }
    let (best_val_accuracy, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainedModel {
        model,
        history: TrainingHistory {
            epochs,
            best_epoch,
            best_val_accuracy,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainer_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr_decay: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
