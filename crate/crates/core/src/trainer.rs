//! Mini-batch SGD with validation checkpointing and dip-triggered
//! learning-rate decay.

use serde::Serialize;

use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::layers::sgd_step;
use crate::model::{init_weights, ModelSpec, ModelWeights, POSITIVE};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    /// Absolute validation-accuracy drop below the best so far that counts
    /// as a dip.
    pub dip_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            initial_lr: 0.01,
            lr_drop_factor: 0.1,
            dip_threshold: 0.15,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        // lr = 0 is accepted as a degenerate "evaluate only" run.
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad("initial learning rate must be finite and >= 0");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return bad("lr drop factor must lie in (0, 1)");
        }
        if !(self.dip_threshold > 0.0) {
            return bad("dip threshold must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub lr_in_effect: f64,
}

impl EpochRecord {
    /// Tab-separated log line: epoch, train loss, train accuracy,
    /// validation accuracy, learning rate.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.train_loss, self.train_accuracy, self.val_accuracy, self.lr_in_effect
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy (latest on
    /// ties, so a saturated validation set keeps the most trained weights).
    pub weights: ModelWeights,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Epochs after which the learning rate was cut and the best checkpoint
    /// restored.
    pub rollbacks: Vec<usize>,
}

/// Learning-rate decision after a validation pass.
///
/// If the latest validation accuracy is strictly below the best so far minus
/// `dip_threshold`, the rate is multiplied by `lr_drop_factor` and the
/// caller should restore the best checkpoint (`true`).
pub fn adaptive_lr(records: &[EpochRecord], current_lr: f64, config: &TrainConfig) -> (f64, bool) {
    let Some(latest) = records.last() else {
        return (current_lr, false);
    };
    let best = records.iter().map(|r| r.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
    if latest.val_accuracy < best - config.dip_threshold {
        (current_lr * config.lr_drop_factor, true)
    } else {
        (current_lr, false)
    }
}

fn check_shapes<S: Sample>(spec: &ModelSpec, sets: &[&[S]]) -> Result<()> {
    let expected = spec.input_shape();
    for set in sets {
        for (i, s) in set.iter().enumerate() {
            let px = s.pixels()?;
            if px.shape() != expected {
                return Err(Error::dim(format!(
                    "sample {i} has shape {:?}, model `{}` expects {expected:?}",
                    px.shape(),
                    spec.name()
                )));
            }
        }
    }
    Ok(())
}

pub fn train<S: Sample>(spec: &ModelSpec, split: &DatasetSplit<S>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(init_weights(spec, config.seed), split, config)
}

/// Trains starting from the given weights instead of a fresh
/// initialisation.
pub fn train_from<S: Sample>(
    initial: ModelWeights,
    split: &DatasetSplit<S>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    check_shapes(initial.spec(), &[&split.train, &split.validation])?;

    let mut weights = initial;
    let mut best = weights.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut lr = config.initial_lr;
    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut rollbacks = Vec::new();
    let mut rng = Rng::new(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grad_sum: Option<Vec<Tensor>> = None;
            for &i in batch {
                let sample = &split.train[i];
                let (loss, probs, grads) = weights.loss_and_grads(&*sample.pixels()?, sample.label())?;
                loss_sum += loss;
                correct += usize::from(probs.argmax() == sample.label());
                match grad_sum.as_mut() {
                    None => grad_sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            let mut grads = grad_sum.expect("chunks are non-empty");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            sgd_step(weights.params_mut(), &grads, lr)?;
            if !weights.is_finite() {
                return Err(Error::Numeric(format!(
                    "weights diverged to non-finite values in epoch {epoch} (lr {lr})"
                )));
            }
        }
        let n = split.train.len() as f64;
        let train_accuracy = correct as f64 / n;
        let val_accuracy = if split.validation.is_empty() {
            train_accuracy
        } else {
            evaluate(&weights, &split.validation)?.accuracy
        };
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy,
            val_accuracy,
            lr_in_effect: lr,
        });
        if val_accuracy >= best_val {
            best_val = val_accuracy;
            best = weights.clone();
            best_epoch = epoch;
        }
        let (new_lr, rollback) = adaptive_lr(&records, lr, config);
        if rollback {
            weights = best.clone();
            rollbacks.push(epoch);
        }
        lr = new_lr;
    }
    Ok(TrainOutcome {
        weights: best,
        records,
        best_epoch,
        rollbacks,
    })
}

/// Binary confusion counts with class 1 as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn record(&mut self, label: usize, predicted: usize) {
        match (label == POSITIVE, predicted == POSITIVE) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn from_pairs(labels: &[usize], predictions: &[usize]) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (&l, &p) in labels.iter().zip(predictions) {
            cm.record(l, p);
        }
        cm
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Classifies each sample by the argmax of its softmax scores.
pub fn evaluate<S: Sample>(weights: &ModelWeights, samples: &[S]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty set".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for s in samples {
        let scores = weights.predict(&*s.pixels()?)?;
        cm.record(s.label(), scores.argmax());
    }
    Ok(Evaluation {
        accuracy: cm.accuracy(),
        confusion: cm,
    })
}

/// `TP / (TP + FP)` and `TP / (TP + FN)`; `None` where the denominator is
/// zero.
pub fn precision_recall(cm: &ConfusionMatrix) -> (Option<f64>, Option<f64>) {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    (ratio(cm.tp, cm.tp + cm.fp), ratio(cm.tp, cm.tp + cm.fn_))
}
