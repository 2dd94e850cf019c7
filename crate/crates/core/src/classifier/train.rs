//! Mini-batch SGD with classical momentum, early stopping on validation loss
//! and best-epoch weight restoration.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    backward_into, cross_entropy, decide, forward_batch, predict_proba, ClassifierParams, Mode, Real, HIDDEN_UNITS,
};
use crate::embedding::ConcatFeature;
use crate::error::{Error, Result};
use crate::pyramid::PrognosisLabel;
use crate::seeds;

/// Training loss below which further epochs cannot change the model meaningfully.
pub const CONVERGED_LOSS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation_enabled: bool,
    #[serde(default = "default_hidden")]
    pub hidden_units: usize,
}

fn default_hidden() -> usize {
    HIDDEN_UNITS
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_scales(1)
    }
}

impl TrainConfig {
    /// Defaults for a classifier over `m_count` magnifications: learning rate
    /// 1e-4 for a single scale and 1e-3 for two or three.
    pub fn for_scales(m_count: usize) -> Self {
        TrainConfig {
            learning_rate: if m_count <= 1 { 1e-4 } else { 1e-3 },
            momentum: 0.9,
            dropout_rate: 0.5,
            max_epochs: 20,
            patience: 3,
            min_delta: 1e-4,
            batch_size: 32,
            seed: 0,
            augmentation_enabled: true,
            hidden_units: HIDDEN_UNITS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.dropout_rate)
            && self.max_epochs > 0
            && self.patience > 0
            && self.min_delta >= 0.0
            && self.batch_size > 0
            && self.hidden_units > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad training config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    EarlyStopped,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Zero-based index of the last epoch run.
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub augmented: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue { improved: bool },
    Stop { improved: bool },
}

/// Stops once validation loss has failed to improve on the best value by
/// more than `min_delta` for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        let improved = val_loss < self.best - self.min_delta;
        if improved {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        if self.wait >= self.patience {
            StopDecision::Stop { improved }
        } else {
            StopDecision::Continue { improved }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Supplies freshly augmented training features for each epoch, row-aligned
/// with the training set.
pub trait EpochAugmenter: Sync {
    fn epoch_features(&self, epoch: usize) -> Result<Vec<Vec<f32>>>;
}

/// Feature matrix (one row per patch) with class indices (0 good, 1 bad).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures<F: Real = f32> {
    pub x: Array2<F>,
    pub y: Vec<usize>,
}

impl<F: Real> LabeledFeatures<F> {
    pub fn from_rows(rows: &[Vec<f32>], labels: &[PrognosisLabel]) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} labels", rows.len()),
                actual: labels.len().to_string(),
            });
        }
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: format!("rows of {dim}"),
                actual: r.len().to_string(),
            });
        }
        let x = Array2::from_shape_fn((rows.len(), dim), |(i, j)| F::of(f64::from(rows[i][j])));
        Ok(LabeledFeatures {
            x,
            y: labels.iter().map(|l| l.index()).collect(),
        })
    }

    pub fn from_features(features: &[ConcatFeature], labels: &[PrognosisLabel]) -> Result<Self> {
        let rows: Vec<Vec<f32>> = features.iter().map(|f| f.values().to_vec()).collect();
        Self::from_rows(&rows, labels)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn evaluate<F: Real>(params: &ClassifierParams<F>, set: &LabeledFeatures<F>) -> Result<(f64, f64)> {
    let probs = predict_proba(params, set.x.view())?;
    let n = set.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, &y) in probs.iter().zip(&set.y) {
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        correct += usize::from(usize::from(decide(*p)) == y);
    }
    Ok((loss / n, correct as f64 / n))
}

/// Trains `params` and returns the weights of the epoch with the lowest
/// validation loss together with the per-epoch history.
pub fn train<F: Real>(
    mut params: ClassifierParams<F>,
    train_set: &LabeledFeatures<F>,
    val_set: &LabeledFeatures<F>,
    cfg: &TrainConfig,
    augment: Option<&dyn EpochAugmenter>,
) -> Result<(ClassifierParams<F>, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    for set in [train_set, val_set] {
        if set.x.ncols() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} features", params.input_dim()),
                actual: set.x.ncols().to_string(),
            });
        }
    }
    let augment = augment.filter(|_| cfg.augmentation_enabled);
    let lr = F::of(cfg.learning_rate);
    let mu = F::of(cfg.momentum);
    let mut velocity = ClassifierParams::zeros(params.input_dim(), params.hidden());
    let mut grads = ClassifierParams::zeros(params.input_dim(), params.hidden());
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_accuracy: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
        augmented: augment.is_some(),
    };
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.max_epochs {
        let augmented;
        let x_epoch = match augment {
            Some(a) => {
                let rows = a.epoch_features(epoch)?;
                if rows.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: format!("{n} augmented rows"),
                        actual: rows.len().to_string(),
                    });
                }
                augmented = Array2::from_shape_fn((n, params.input_dim()), |(i, j)| F::of(f64::from(rows[i][j])));
                &augmented
            }
            None => &train_set.x,
        };

        let mut shuffle_rng = seeds::rng(cfg.seed, &[seeds::TAG_SHUFFLE, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x_epoch.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| train_set.y[i]).collect();
            let mut rng = seeds::rng(cfg.seed, &[seeds::TAG_DROPOUT, epoch as u64, batch as u64]);
            let cache = forward_batch(&params, xb.view(), Mode::Train, cfg.dropout_rate, &mut rng)?;
            let loss = cross_entropy(&cache, &yb);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    value: loss,
                });
            }
            loss_sum += loss * yb.len() as f64;
            backward_into(&params, &cache, &yb, &mut grads);
            for ((p, v), g) in params
                .slices_mut()
                .into_iter()
                .zip(velocity.slices_mut())
                .zip(grads.slices())
            {
                for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mu * *v - lr * g;
                    *p = *p + *v;
                }
            }
        }
        let train_loss = loss_sum / n as f64;
        let (val_loss, val_acc) = evaluate(&params, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                value: val_loss,
            });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.val_accuracy.push(val_acc);
        history.stopped_epoch = epoch;

        let decision = stopper.observe(val_loss);
        let (StopDecision::Continue { improved } | StopDecision::Stop { improved }) = decision;
        if improved {
            best.clone_from(&params);
            history.best_epoch = epoch;
        }
        if train_loss < CONVERGED_LOSS {
            history.stop_reason = StopReason::Converged;
            break;
        }
        if matches!(decision, StopDecision::Stop { .. }) {
            history.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    Ok((best, history))
}
