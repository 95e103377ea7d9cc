use serde::{Deserialize, Serialize};

use super::{arch_step, weight_step, BilevelConfig, Objective, OptimizerState};
use crate::cells::ModelState;
use crate::{Error, Result};

/// Patience-based stopping: quit after `patience` consecutive epochs without
/// a validation improvement, or after `max_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop { patience: 2, max_epochs: 50 }
    }
}

impl EarlyStop {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageOptions {
    /// Alternate architecture steps with weight steps; off means weights only.
    pub update_alphas: bool,
    /// Treat the incoming state as a checkpoint candidate (epoch 0).
    pub include_initial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based; 0 denotes the incoming state.
    pub epoch: usize,
    /// Mean of the per-batch losses seen before each weight update.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    /// Best-validation checkpoint.
    pub state: ModelState,
    pub best_val: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Sample-weighted mean loss over `batches`.
pub fn evaluate<O: Objective>(obj: &O, state: &ModelState, batches: &[O::Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Precondition("evaluation over zero batches".into()));
    }
    let mut total = 0.0;
    let mut weight = 0.0;
    for b in batches {
        let w = obj.batch_weight(b);
        total += obj.loss(state, b)? * w;
        weight += w;
    }
    Ok(total / weight)
}

/// One pass over `train`. With `update_alphas`, each mini-batch is preceded
/// by an architecture step on `val[cursor % len]`, advancing the cursor.
/// Returns the sample-weighted mean of the pre-update batch losses.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch<O: Objective>(
    obj: &O,
    state: &mut ModelState,
    opt: &mut OptimizerState,
    train: &[O::Batch],
    val: &[O::Batch],
    cfg: &BilevelConfig,
    cursor: &mut usize,
    update_alphas: bool,
) -> Result<f64> {
    if train.is_empty() || (update_alphas && val.is_empty()) {
        return Err(Error::Precondition("epoch needs non-empty train and validation batches".into()));
    }
    let mut sum = 0.0;
    let mut weight = 0.0;
    for batch in train {
        if update_alphas {
            let v = &val[*cursor % val.len()];
            *cursor += 1;
            arch_step(obj, state, opt, batch, v, cfg)?;
        }
        let w = obj.batch_weight(batch);
        sum += weight_step(obj, state, opt, batch, cfg.clip_norm)? * w;
        weight += w;
    }
    Ok(sum / weight)
}

/// Trains until the stopping rule fires and returns the best-validation
/// checkpoint. With `update_alphas`, every mini-batch first takes one
/// architecture step on the next validation batch (round robin), then one
/// weight step. `on_epoch` sees each epoch's stats as they complete.
pub fn train_stage<O: Objective>(
    obj: &O,
    state: ModelState,
    train: &[O::Batch],
    val: &[O::Batch],
    cfg: &BilevelConfig,
    stop: EarlyStop,
    opts: StageOptions,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<StageOutcome> {
    stop.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Precondition("training needs non-empty train and validation batches".into()));
    }
    let mut opt = OptimizerState::new(cfg);
    let mut state = state;
    let mut history = Vec::new();
    let (mut best_val, mut best_epoch, mut best_state) = (f64::INFINITY, 0, None);
    if opts.include_initial {
        let v = evaluate(obj, &state, val)?;
        let stats = EpochStats { epoch: 0, train_loss: evaluate(obj, &state, train)?, val_loss: v };
        on_epoch(&stats);
        history.push(stats);
        best_val = v;
        best_state = Some(state.clone());
    }
    let mut cursor = 0usize;
    let mut bad = 0usize;
    for epoch in 1..=stop.max_epochs {
        let train_loss = run_epoch(obj, &mut state, &mut opt, train, val, cfg, &mut cursor, opts.update_alphas)?;
        let val_loss = evaluate(obj, &state, val)?;
        let stats = EpochStats { epoch, train_loss, val_loss };
        on_epoch(&stats);
        history.push(stats);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_state = Some(state.clone());
            bad = 0;
        } else {
            bad += 1;
            if bad >= stop.patience {
                break;
            }
        }
    }
    let state = best_state.unwrap_or(state);
    Ok(StageOutcome { state, best_val, best_epoch, history })
}
