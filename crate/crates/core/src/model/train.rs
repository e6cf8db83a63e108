use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsAccumulator;
use super::{
    forward_original, forward_train, Adam, LossParts, MaskSource, Metrics, Model, ModelVars,
    TrainConfig,
};
use crate::data::{Dataset, NormStats, WindowSample};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::seed::{derive_seed, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Means over the epoch's training windows.
    pub train: LossParts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_rmse: Option<f64>,
    /// Fraction of input cells masked in the augmented view.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Batch-mean losses of the very first optimizer step.
    pub first_step: LossParts,
    pub epochs: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    /// One row per epoch; loss columns only for terms that were computed.
    pub fn to_csv(&self) -> String {
        let first = self.epochs.first();
        let has_g = first.is_some_and(|e| e.train.global.is_some());
        let has_c = first.is_some_and(|e| e.train.modality.is_some());
        let has_val = first.is_some_and(|e| e.val_rmse.is_some());
        let has_mask = first.is_some_and(|e| e.mask_rate.is_some());
        let mut header = vec!["epoch", "total", "forecast"];
        if has_g {
            header.push("global");
        }
        if has_c {
            header.push("modality");
        }
        if has_val {
            header.push("val_rmse");
        }
        if has_mask {
            header.push("mask_rate");
        }
        let mut out = header.join(",") + "\n";
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.train.total.to_string(),
                e.train.forecast.to_string(),
            ];
            if has_g {
                row.push(opt(e.train.global));
            }
            if has_c {
                row.push(opt(e.train.modality));
            }
            if has_val {
                row.push(opt(e.val_rmse));
            }
            if has_mask {
                row.push(opt(e.mask_rate));
            }
            out += &(row.join(",") + "\n");
        }
        out
    }

    /// Write `history.json` and `history.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = dir.join("history.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("history.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: History,
    /// Validation metrics of the returned parameters, if there is a validation split.
    pub val_metrics: Option<Metrics>,
}

fn add_scaled(acc: &mut Option<ParamStore>, grads: ParamStore, scale: f64) {
    match acc {
        None => {
            let mut g = grads;
            for name in g.names().cloned().collect::<Vec<_>>() {
                g.get_mut(&name)
                    .expect("present")
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v *= scale);
            }
            *acc = Some(g);
        }
        Some(total) => {
            for (name, g) in grads.iter() {
                let t = total.get_mut(name).expect("same parameter set");
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }
}

fn attribute(e: Error, window: usize, anchor: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "training window {window} (target step {anchor}): {msg}"
        )),
        other => other,
    }
}

/// Fit a model on the training windows of `data`.
///
/// Windows are shuffled per epoch from `seed`, every window gets a fresh
/// mask per epoch, and batch gradients are averaged in batch order, so a
/// fixed `(config, seed)` reproduces bit-identical parameters. `observer`
/// sees each finished epoch.
pub fn train(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.nodes() != model.nodes || data.modalities() != model.modalities {
        return Err(Error::Config(format!(
            "model is built for {} nodes x {} modalities, data has {} x {}",
            model.nodes,
            model.modalities,
            data.nodes(),
            data.modalities()
        )));
    }
    let names = data.series.modality_names().to_vec();
    let mut params = model.init_params(seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = History::default();
    let n = data.train.len();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, "shuffle", &[epoch as u64]));
        let mut epoch_parts = LossParts::default();
        let mut masked = 0.0;
        let mut mask_count = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = None;
            let mut batch_parts = LossParts::default();
            for &i in batch {
                let w = &data.train[i];
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let vars = ModelVars::bind(&bound, model)?;
                let mask_seed = derive_seed(seed, "mask", &[epoch as u64, i as u64]);
                let f = forward_train(
                    &mut tape,
                    &vars,
                    model,
                    cfg,
                    w,
                    MaskSource::Sampled(mask_seed),
                )
                .map_err(|e| attribute(e, i, w.anchor))?;
                let g = tape.backward(f.loss)?;
                add_scaled(&mut grads, bound.gradients(&g, &tape), scale);
                batch_parts.accumulate(&f.parts, scale);
                epoch_parts.accumulate(&f.parts, 1.0 / n as f64);
                if let Some(m) = &f.mask {
                    masked += m.masked_fraction();
                    mask_count += 1;
                }
            }
            if epoch == 1 && step == 0 {
                history.first_step = batch_parts;
            }
            adam.step(&mut params, &grads.expect("non-empty batch"))?;
        }

        let val_rmse = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(&params, model, &data.val, &names, &data.stats)?.overall_rmse)
        };
        let record = EpochRecord {
            epoch,
            train: epoch_parts,
            val_rmse,
            mask_rate: (mask_count > 0).then(|| masked / mask_count as f64),
        };
        observer(&record);
        history.epochs.push(record);

        if let (Some(patience), Some(rmse)) = (cfg.early_stopping_patience, val_rmse) {
            if best.as_ref().map_or(true, |(b, _, _)| rmse < *b) {
                best = Some((rmse, params.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    history.stopped_early = epoch < cfg.epochs;
                    break;
                }
            }
        }
    }

    if let Some((_, best_params, epoch)) = best {
        params = best_params;
        history.best_epoch = Some(epoch);
    }
    let val_metrics = if data.val.is_empty() {
        None
    } else {
        Some(evaluate(&params, model, &data.val, &names, &data.stats)?)
    };
    Ok(TrainOutcome {
        params,
        history,
        val_metrics,
    })
}

/// Normalized forecast `[O, N, M]` for one input block, original view only.
pub fn predict_window(params: &ParamStore, model: &Model, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = ModelVars::bind(&bound, model)?;
    let (_, y) = forward_original(&mut tape, &vars, model, x)?;
    Ok(tape.value(y).clone())
}

/// Denormalized metrics of `params` over `windows`.
pub fn evaluate(
    params: &ParamStore,
    model: &Model,
    windows: &[WindowSample],
    modality_names: &[String],
    stats: &NormStats,
) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::new(modality_names, model.config.output_steps, stats);
    for w in windows {
        let pred = predict_window(params, model, &w.x)?;
        if !pred.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite forecast for target step {}",
                w.anchor
            )));
        }
        acc.add(&pred, &w.y)?;
    }
    Ok(acc.finish())
}
