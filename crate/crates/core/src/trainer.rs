//! Mini-batch training with momentum SGD and a step-decayed learning rate.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, substream_seed, AugmentConfig, ImageSet};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{save_checkpoint, ModelGraph};
use crate::param::ParamStore;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_rate: f64,
    pub decay_every_epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub dropout_rate: f64,
    /// Rescale the global gradient norm to at most this value. Off by default.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// 0.045 initial rate decayed by 0.94 every two epochs, 0.9 momentum,
    /// batch size 10, full augmentation.
    pub fn standard() -> Self {
        TrainConfig {
            initial_lr: 0.045,
            decay_rate: 0.94,
            decay_every_epochs: 2,
            momentum: 0.9,
            batch_size: 10,
            epochs: 40,
            seed: 0,
            augment: AugmentConfig::standard(),
            dropout_rate: 0.5,
            clip_norm: None,
        }
    }

    /// 56 epochs, as used for the larger four-class corpus.
    pub fn kermany() -> Self {
        TrainConfig {
            epochs: 56,
            ..Self::standard()
        }
    }

    /// 40 epochs, as used for the five-class corpus.
    pub fn octid() -> Self {
        Self::standard()
    }

    /// Batch size used for single-backbone comparison models.
    pub const BASELINE_BATCH_SIZE: usize = 15;

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_lr", self.initial_lr),
            ("decay_rate", self.decay_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::InvalidArgument("decay_every_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::InvalidArgument(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::standard()
    }
}

/// `initial_lr · decay_rate^⌊epoch / decay_every_epochs⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.decay_every_epochs.max(1)) as i32;
    cfg.initial_lr * cfg.decay_rate.powi(steps)
}

/// Classical momentum: `v ← μ·v + g`, `p ← p − η·v`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Momentum SGD over the trainable entries of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && !p.grad.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient for {}", p.name)));
        }
        for p in params.iter_mut().filter(|p| p.trainable) {
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            sgd_step(p.value.data_mut(), p.grad.data(), v, lr, self.momentum);
        }
        Ok(())
    }
}

fn clip_gradients(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Columns `epoch,lr,train_loss,val_accuracy`; a missing validation
    /// accuracy is an empty cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_accuracy\n");
        for r in &self.records {
            let val = r.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.learning_rate, r.train_loss, val);
        }
        out
    }
}

fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    t
}

fn check_classes(model: &ModelGraph, set: &ImageSet) -> Result<()> {
    if set.classes.len() != model.class_count() {
        return Err(Error::Training(format!(
            "data has {} classes but the model predicts {}",
            set.classes.len(),
            model.class_count()
        )));
    }
    Ok(())
}

/// Stateful epoch runner: owns optimizer velocity across epochs.
pub struct Trainer {
    pub config: TrainConfig,
    optimizer: Sgd,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.momentum);
        Ok(Trainer { config, optimizer })
    }

    /// One pass over `train`; returns the mean batch loss.
    pub fn train_epoch(&mut self, model: &mut ModelGraph, train: &ImageSet, epoch: usize) -> Result<f64> {
        check_classes(model, train)?;
        if train.is_empty() {
            return Err(Error::Training("empty training set".into()));
        }
        let cfg = &self.config;
        model.head.dropout_rate = cfg.dropout_rate;
        model.spec.head.dropout_rate = cfg.dropout_rate;
        let lr = lr_at(epoch, cfg);
        let e = epoch as u64;

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, &[e, 0])));

        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment.is_identity() {
                        train.images[i].clone()
                    } else {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, &[e, 1, i as u64]));
                        augment(&train.images[i], &cfg.augment, &mut rng)
                    }
                })
                .collect();
            let refs: Vec<&Tensor> = images.iter().collect();
            let batch = Tensor::stack(&refs)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let targets = one_hot(&labels, model.class_count());

            let tape = Tape::new();
            let x = tape.constant(batch)?;
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, &[e, 2, b as u64]));
            let out = model.forward(&tape, x, true, &mut rng)?;
            let probs = tape.softmax(out.logits)?;
            let loss = tape.cross_entropy(probs, &targets).map_err(|err| match err {
                Error::NonFinite { .. } => Error::Training(format!("non-finite loss at epoch {epoch}")),
                other => other,
            })?;
            let loss_value = tape.value(loss).item();
            let grads = tape.backward(loss)?;

            model.params.zero_grad();
            model.params.accumulate(&grads)?;
            if let Some(max) = cfg.clip_norm {
                clip_gradients(&mut model.params, max);
            }
            self.optimizer
                .step(&mut model.params, lr)
                .map_err(|err| Error::Training(format!("epoch {epoch}, batch {b}: {err}")))?;
            model.update_running_stats(&out.batch_stats)?;

            loss_sum += loss_value;
            batches += 1;
        }
        Ok(loss_sum / batches as f64)
    }
}

/// Eval-mode confusion matrix over `set`.
pub fn evaluate(model: &ModelGraph, set: &ImageSet, batch_size: usize) -> Result<ConfusionMatrix> {
    check_classes(model, set)?;
    let mut cm = ConfusionMatrix::new(set.classes.clone());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().map(|&i| &set.images[i]).collect();
        let batch = Tensor::stack(&refs)?;
        for (&i, pred) in chunk.iter().zip(model.predict_classes(&batch)?) {
            cm.accumulate_index(set.labels[i], pred)?;
        }
    }
    Ok(cm)
}

pub fn accuracy(model: &ModelGraph, set: &ImageSet, batch_size: usize) -> Result<f64> {
    evaluate(model, set, batch_size)?.overall_accuracy()
}

/// Trains for `cfg.epochs` epochs, validating on `val` after each one. When
/// `best_checkpoint` is given, the model is saved there whenever validation
/// accuracy improves.
pub fn fit(
    model: &mut ModelGraph,
    train: &ImageSet,
    val: Option<&ImageSet>,
    cfg: &TrainConfig,
    best_checkpoint: Option<&Path>,
) -> Result<TrainHistory> {
    check_classes(model, train)?;
    if let Some(v) = val {
        check_classes(model, v)?;
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut history = TrainHistory::default();
    let mut best = f64::NEG_INFINITY;
    for epoch in 0..cfg.epochs {
        let train_loss = trainer.train_epoch(model, train, epoch)?;
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(accuracy(model, v, cfg.batch_size)?),
            _ => None,
        };
        if let (Some(acc), Some(path)) = (val_accuracy, best_checkpoint) {
            if acc > best {
                best = acc;
                save_checkpoint(model, path)?;
            }
        }
        history.records.push(EpochRecord {
            epoch,
            learning_rate: lr_at(epoch, cfg),
            train_loss,
            val_accuracy,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::standard();
        assert!((lr_at(0, &cfg) - 0.045).abs() < 1e-15);
        assert!((lr_at(1, &cfg) - 0.045).abs() < 1e-15);
        assert!((lr_at(2, &cfg) - 0.0423).abs() < 1e-12);
        assert!((lr_at(10, &cfg) - 0.045 * 0.94f64.powi(5)).abs() < 1e-15);
        assert!((lr_at(10, &cfg) - 0.033_025_681_008).abs() < 1e-9);
    }

    #[test]
    fn schedule_non_increasing_piecewise_constant() {
        let cfg = TrainConfig::standard();
        for e in 0..100 {
            assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
            if e % 2 == 0 {
                assert_eq!(lr_at(e, &cfg), lr_at(e + 1, &cfg));
            }
        }
    }

    #[test]
    fn plain_sgd() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[2.0], &mut v, 0.1, 0.0);
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let (g, lr) = (0.7, 0.05);
        let mut p = [0.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[g], &mut v, lr, 0.9);
        sgd_step(&mut p, &[g], &mut v, lr, 0.9);
        assert!((p[0] + lr * (g + 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        // loss = p²/2, grad = p. At momentum 0.9 the contraction per step is
        // only √0.9, so the 200-step bound is checked at lower momentum.
        for momentum in [0.0, 0.5] {
            let mut p = [1.0f64];
            let mut v = [0.0];
            let mut steps = 0;
            while p[0].abs() > 1e-6 {
                let g = p[0];
                sgd_step(&mut p, &[g], &mut v, 0.1, momentum);
                steps += 1;
                assert!(steps <= 200, "momentum {momentum}: p = {}", p[0]);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = TrainConfig::standard();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::standard();
        c.initial_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::standard();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut s = ParamStore::new();
        s.insert(crate::param::Parameter::new("w", Tensor::ones(&[1]), true)).unwrap();
        s.get_mut("w").unwrap().grad.data_mut()[0] = f64::NAN;
        let err = Sgd::new(0.9).step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("w"));
    }

    #[test]
    fn history_csv() {
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 0,
                learning_rate: 0.045,
                train_loss: 0.5,
                val_accuracy: Some(1.0),
            }],
        };
        assert_eq!(h.to_csv(), "epoch,lr,train_loss,val_accuracy\n0,0.045,0.5,1\n");
    }
}
