//! Deterministic mini-batch training with dropout, gradient clipping and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::DiscourseInstance;
use crate::error::{BmgfError, Result};
use crate::metrics::EvalReport;
use crate::model::{argmax, Model, Prepared};
use crate::tensor::{clip_grad_l2, NamedArray, OptimizerState};

const SHUFFLE_STREAM: u64 = 1;
/// Dropout streams start here; each instance visit gets its own stream.
const DROPOUT_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub validation_metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model with the best validation parameters loaded.
    pub model: Model,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Predicted label indices for `instances`.
pub fn predict_labels(model: &Model, instances: &[DiscourseInstance]) -> Result<Vec<usize>> {
    Ok(model.predict_instances(instances)?.iter().map(|p| argmax(p)).collect())
}

pub fn evaluate(model: &Model, instances: &[DiscourseInstance]) -> Result<EvalReport> {
    let preds = predict_labels(model, instances)?;
    EvalReport::compute(&preds, instances, &model.schema)
}

/// Trains for `model.config.epochs` epochs. After each epoch the model is
/// scored on `validation` (macro-F1 for the four-way schema, accuracy
/// otherwise) and the best parameters are kept. With no validation data the
/// training set is scored instead.
pub fn train(mut model: Model, train_set: &[DiscourseInstance], validation: &[DiscourseInstance]) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(BmgfError::Data { location: "train".into(), message: "no training instances".into() });
    }
    let select_on = if validation.is_empty() {
        log::warn!("no validation instances; selecting on the training set");
        train_set
    } else {
        validation
    };
    let cfg = model.config.clone();
    let prepared = model.prepare(train_set)?;
    let mut optimizer = OptimizerState::new(&model.store, cfg.adam());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut visits: u64 = 0;

    let score = |m: &Model| -> Result<f64> { Ok(evaluate(m, select_on)?.selection_metric(&m.schema)) };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<NamedArray>, OptimizerState)> = None;
    if cfg.epochs == 0 {
        let metric = score(&model)?;
        log::info!("epochs = 0; initial validation metric {metric:.4}");
        best = Some((metric, 0, model.store.to_named_arrays(), optimizer.clone()));
    }

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut last_norm = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let rngs = (0..batch.len())
                .map(|k| {
                    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
                    r.set_stream(DROPOUT_STREAM_BASE + visits + k as u64);
                    r
                })
                .collect();
            visits += batch.len() as u64;
            let (loss, grads) = model.batch_gradients(&batch, Some(rngs))?;
            epoch_loss += loss * batch.len() as f64;
            model.store.zero_grad();
            model.store.accumulate_raw(&grads);
            last_norm = clip_grad_l2(&mut model.store, cfg.clip)?;
            optimizer.adam_step(&mut model.store)?;
        }
        let metric = score(&model)?;
        let train_loss = epoch_loss / prepared.len() as f64;
        log::info!("epoch {epoch}: loss {train_loss:.4}, validation metric {metric:.4}");
        history.push(EpochLog { epoch, train_loss, grad_norm: last_norm, validation_metric: metric });
        if best.as_ref().map_or(true, |(b, ..)| metric > *b) {
            best = Some((metric, epoch, model.store.to_named_arrays(), optimizer.clone()));
        }
    }

    let (best_metric, best_epoch, best_params, best_opt) = best.expect("at least one evaluation");
    let last = Checkpoint::from_model(&model, Some(&optimizer), cfg.epochs, Some(best_metric));
    model.store.load_named_arrays(&best_params)?;
    let best = Checkpoint::from_model(&model, Some(&best_opt), best_epoch, Some(best_metric));
    Ok(TrainOutcome { model, best, last, history })
}
