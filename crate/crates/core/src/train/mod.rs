//! Loss, optimizer, cross-validation splits and the training loop.

mod adam;
mod loss;
mod split;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xkt_autograd::{Real, Tape, Tensor};

use crate::data::{batches, StudentSequence};
use crate::error::{KtError, Result};
use crate::eval::{one_step, EvalOptions, Metrics, ProtocolResult};
use crate::model::{forward_next, Dropout, Model};

pub use adam::{clip_global_norm, Adam};
pub use loss::{bce_loss, Bce, PROB_CLAMP};
pub use split::{fold_split, kfold_split, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: Real,
    pub dropout: Real,
    pub max_epochs: usize,
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
    pub history_len: usize,
    pub seed: u64,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            lr: 0.001,
            dropout: 0.05,
            max_epochs: 300,
            patience: 10,
            history_len: 100,
            seed: 12405,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(KtError::Config {
                field: field.into(),
                msg: msg.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad("patience", "must be positive and at most max_epochs");
        }
        if self.history_len < 2 {
            return bad("history_len", "must be at least 2");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip", "must be finite and non-negative");
        }
        Ok(())
    }
}

/// A stream-separated seed derived from `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss per valid step over the epoch.
    pub train_loss: f64,
    pub val: Option<Metrics>,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    /// A numeric failure ended training; the model holds the best parameters seen.
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub status: TrainStatus,
}

/// Validation one-step metrics, `None` when nothing can be scored.
pub fn validate_one_step(model: &Model, seqs: &[StudentSequence], opts: EvalOptions) -> Result<Option<Metrics>> {
    let preds = one_step(model, seqs, opts)?;
    Ok(ProtocolResult::from_predictions("one_step", None, opts.history, &preds, 0)?.metrics)
}

/// One optimizer pass over `train` in a seeded order. Returns the summed
/// loss and the number of scored steps.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut Adam,
    train: &[StudentSequence],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, usize)> {
    let shuffle = derive_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64);
    let dropout = Dropout::new(cfg.dropout, derive_seed(cfg.seed, DROPOUT_STREAM, epoch as u64))?;
    let mut loss_sum = 0.0;
    let mut count = 0;
    for batch in batches(train, cfg.history_len, cfg.batch_size, Some(shuffle))? {
        if batch.lengths.iter().all(|&l| l < 2) {
            continue;
        }
        let mut grads: Vec<Tensor> = {
            let tape = Tape::new();
            let p = model.store().bind(&tape, true);
            let next = forward_next(model, &tape, &p, &batch, Some(&dropout))?;
            let loss = bce_loss(next.probs, &next.labels, &next.mask)?;
            loss_sum += loss.sum as f64;
            count += loss.count;
            let g = tape.backward(loss.mean)?;
            p.gradients(&g)
        };
        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, cfg.grad_clip);
        }
        adam.step(model.store_mut(), &grads)?;
    }
    Ok((loss_sum, count))
}

/// Trains until `max_epochs` or until validation AUC has not improved for
/// `patience` epochs, then restores the parameters of the best epoch.
///
/// `on_epoch` sees every record as it is produced. A numeric failure stops
/// training with [`TrainStatus::Aborted`] and the best parameters restored;
/// other errors are returned.
pub fn train(
    model: &mut Model,
    train: &[StudentSequence],
    val: &[StudentSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(KtError::contract("training needs non-empty train and validation sets"));
    }
    let opts = EvalOptions {
        history: cfg.history_len,
        batch_size: cfg.batch_size,
    };
    let mut adam = Adam::new(model.store(), cfg.lr);
    let mut best_params = model.store().tensors();
    let mut best_auc: Option<f64> = None;
    let mut best_epoch: Option<usize> = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut status = TrainStatus::Completed;

    for epoch in 1..=cfg.max_epochs {
        let outcome = train_epoch(model, &mut adam, train, cfg, epoch)
            .and_then(|(sum, n)| Ok((sum, n, validate_one_step(model, val, opts)?)));
        let (sum, n, val_metrics) = match outcome {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                status = TrainStatus::Aborted { reason: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        };
        let auc = val_metrics.as_ref().and_then(|m| m.auc);
        let improved = match (best_epoch, auc, best_auc) {
            (None, _, _) => true,
            (Some(_), Some(a), Some(b)) => a > b,
            (Some(_), Some(_), None) => true,
            (Some(_), None, _) => false,
        };
        if improved {
            best_auc = auc;
            best_epoch = Some(epoch);
            best_params = model.store().tensors();
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: if n == 0 { 0.0 } else { sum / n as f64 },
            val: val_metrics,
            improved,
        };
        on_epoch(&record);
        epochs.push(record);
        if since_best >= cfg.patience {
            status = TrainStatus::EarlyStopped;
            break;
        }
    }
    model.store_mut().set_tensors(best_params)?;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_auc: best_auc,
        status,
    })
}
