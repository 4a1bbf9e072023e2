use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfad_tensor::{Adam, AdamConfig, Element, ParamStore, Tape};

use super::loss::masked_mae_loss;
use super::metrics::{MetricAccumulator, MetricReport};
use super::schedule::{curriculum_horizon, learning_rate};
use crate::config::TrainConfig;
use crate::data::{Splits, WindowSet};
use crate::error::{Error, Result};
use crate::model::Sfadnet;

const STREAM_SHUFFLE: u64 = 1 << 56;
const STREAM_DROPOUT: u64 = 2 << 56;

/// Generator for one purpose of one run: stream 0 initialises parameters,
/// other streams are derived per epoch and batch so every random draw is a
/// pure function of `(seed, epoch, batch)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub horizon: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation report of the best epoch's parameters.
    pub best_val: MetricReport,
    pub best_params: ParamStore<f32>,
    pub final_params: ParamStore<f32>,
    pub stopped_early: bool,
    /// Batches whose loss mask was empty.
    pub empty_batches: usize,
}

/// Masked metrics of the model over every window of `set`, in order.
pub fn evaluate<T: Element>(
    net: &Sfadnet,
    params: &ParamStore<T>,
    set: &WindowSet,
    batch_size: usize,
    mape_threshold: f64,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(net.model.horizon, mape_threshold);
    for_each_prediction(net, params, set, batch_size, |pred, target| {
        acc.add(pred, target, net.nodes * net.model.channels);
    })?;
    Ok(acc.report())
}

/// Calls `f(prediction, target)` with raw-unit `[B, Tf, N, C]` slices for
/// consecutive batches of `set`, in eval mode.
pub fn for_each_prediction<T: Element>(
    net: &Sfadnet,
    params: &ParamStore<T>,
    set: &WindowSet,
    batch_size: usize,
    mut f: impl FnMut(&[f64], &[f64]),
) -> Result<()> {
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut rng = stream_rng(0, 0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = set.batch::<T>(chunk, &net.normalizer);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.constant(batch.x);
        let out = net.forward(&tape, params, &bound, x, &batch.tod, &batch.dow, false, &mut rng)?;
        let pred: Vec<f64> = tape.data(out.prediction).iter().map(|v| v.as_f64()).collect();
        f(&pred, batch.target.data());
    }
    Ok(())
}

/// Minibatch Adam training with warm-up, curriculum, step decay,
/// best-validation selection and early stopping.
pub fn train(
    net: &Sfadnet,
    mut params: ParamStore<f32>,
    splits: &Splits,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    net.check_params(&params)?;
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let mut adam = Adam::new(adam_cfg, &params);
    let tf = net.model.horizon;
    let train_set = &splits.train;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, MetricReport, ParamStore<f32>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut empty_batches = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let horizon = curriculum_horizon(epoch, cfg.warmup_epochs, cfg.curriculum_step, tf);
        let lr = learning_rate(epoch, cfg);
        adam.set_learning_rate(lr);

        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE | epoch as u64));

        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.batch::<f32>(chunk, &net.normalizer);
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let x = tape.constant(batch.x);
            let mut rng = stream_rng(cfg.seed, STREAM_DROPOUT | ((epoch as u64) << 24) | bi as u64);
            let out = net.forward(&tape, &params, &bound, x, &batch.tod, &batch.dow, true, &mut rng)?;
            let loss = masked_mae_loss(&tape, out.prediction, &batch.target, horizon)?;
            if loss.count == 0 {
                empty_batches += 1;
                log::warn!("epoch {epoch} batch {bi}: every target is masked; batch skipped");
                continue;
            }
            let value = tape.item(loss.loss)? as f64;
            if !value.is_finite() {
                log::error!(
                    "non-finite loss at epoch {epoch}, batch {bi}, windows starting at {:?}",
                    batch.starts
                );
                return Err(Error::Numerical {
                    what: format!("training loss {value} (windows starting at {:?})", batch.starts),
                    epoch,
                    batch: bi,
                });
            }
            loss_sum += value * loss.count as f64;
            loss_count += loss.count;
            let grads = tape.backward(loss.loss)?;
            params.zero_grads();
            params.accumulate(&bound, &grads)?;
            adam.step(&mut params)?;
        }

        let val = evaluate(net, &params, &splits.val, cfg.batch_size, cfg.mask_threshold)?;
        let record = EpochRecord {
            epoch,
            lr,
            horizon,
            train_loss: if loss_count == 0 { 0.0 } else { loss_sum / loss_count as f64 },
            val_mae: val.mae,
            val_rmse: val.rmse,
            val_mape: val.mape,
        };
        if !record.val_mae.is_finite() {
            return Err(Error::Numerical { what: "validation MAE".into(), epoch, batch: 0 });
        }
        log::info!(
            "epoch {epoch:>4} lr {lr:.2e} horizon {horizon:>2} train {:.4} val mae {:.4} rmse {:.4} mape {:.2}",
            record.train_loss,
            record.val_mae,
            record.val_rmse,
            record.val_mape
        );
        on_epoch(&record);
        history.push(record);

        let improved = best.as_ref().is_none_or(|(_, b, _)| val.mae < b.mae);
        if improved {
            best = Some((epoch, val, params.clone()));
            since_best = 0;
        } else if horizon == tf {
            since_best += 1;
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            log::info!("early stop at epoch {epoch}: no validation gain for {since_best} epochs");
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val, best_params) = best.expect("max_epochs >= 1");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val,
        best_params,
        final_params: params,
        stopped_early,
        empty_batches,
    })
}
