//! Mini-batch SGD training of the detector.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use spgnn_core::optim::clip_grad_norm;
use spgnn_core::{checkpoint, ParamGrads, ParamStore, Rng, Sgd, Tape};
use spgnn_model::superpixel::SuperpixelGraph;
use spgnn_model::{Detector, LossBreakdown, ModelError};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{io_err, HarnessError, Result};

/// File names inside a run directory.
pub const LOSS_LOG: &str = "loss.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";

/// One optimizer step: mean losses over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Serialize)]
struct CsvRow {
    step: usize,
    rpn_cls: f64,
    rpn_reg: f64,
    head_cls: f64,
    head_reg: f64,
    total: f64,
}

pub struct Trained {
    pub detector: Detector,
    pub store: ParamStore,
    pub trace: Vec<StepRecord>,
}

/// Learning rate at `step` (0-based) within `epoch`.
pub fn learning_rate(cfg: &RunConfig, step: usize, epoch: usize) -> f64 {
    let s = &cfg.schedule;
    let mut lr = cfg.learning_rate();
    if step < s.warmup_steps {
        let t = step as f64 / s.warmup_steps as f64;
        lr *= 0.1 + 0.9 * t;
    }
    let drops = s.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    lr * 0.1f64.powi(drops as i32)
}

/// Superpixel graphs for every sample, or `None`s when the branch is off.
pub fn prepare_graphs(det: &Detector, data: &Dataset) -> Result<Vec<Option<SuperpixelGraph>>> {
    Ok(data
        .samples
        .par_iter()
        .map(|s| det.prepare(&s.image))
        .collect::<spgnn_model::Result<Vec<_>>>()?)
}

fn checkpoint_meta(cfg: &RunConfig, epoch: usize, step: usize) -> serde_json::Value {
    serde_json::json!({ "config": cfg, "epoch": epoch, "step": step })
}

/// Write a checkpoint whose metadata carries the run config.
pub fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &RunConfig, epoch: usize, step: usize) -> Result<()> {
    Ok(checkpoint::save(path, store, &checkpoint_meta(cfg, epoch, step))?)
}

/// Rebuild the detector recorded in a checkpoint and load its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Detector, ParamStore)> {
    let (manifest, _) = checkpoint::load(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let cfg_value = manifest
        .meta
        .get("config")
        .cloned()
        .ok_or_else(|| HarnessError::Config(format!("{}: checkpoint has no config", path.display())))?;
    let cfg: RunConfig = serde_json::from_value(cfg_value)
        .map_err(|e| HarnessError::Config(format!("{}: stored config: {e}", path.display())))?;
    let (det, mut store) = Detector::build(&cfg.detector(), cfg.seed)?;
    checkpoint::load_into(path, &mut store)?;
    Ok((cfg, det, store))
}

fn diverged(e: ModelError, step: usize) -> HarnessError {
    match e {
        ModelError::Numeric(spgnn_core::Error::NonFinite { .. }) => HarnessError::Diverged { step },
        other => other.into(),
    }
}

/// Train on `data`. With `out`, a loss CSV is written and a checkpoint is
/// saved after every epoch. `on_step` sees each step as it completes.
///
/// The images of a batch are processed in parallel and their gradients are
/// summed in batch order, so the loss trace depends only on the config,
/// the seed and the data.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HarnessError::Data("no training images".into()));
    }
    let (detector, mut store) = Detector::build(&cfg.detector(), cfg.seed)?;
    let graphs = prepare_graphs(&detector, data)?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path: PathBuf = dir.join(LOSS_LOG);
            let f = fs::File::create(&path).map_err(io_err(&path))?;
            Some(csv::Writer::from_writer(f))
        }
        None => None,
    };
    let base = Rng::seed(cfg.seed);
    let mut order_rng = base.fork(1);
    let o = &cfg.optimizer;
    let mut opt = Sgd::new(cfg.learning_rate(), o.momentum, o.weight_decay);
    let batch = cfg.schedule.batch_size;
    let max_steps = cfg.schedule.max_steps.unwrap_or(usize::MAX);
    let mut trace = Vec::new();
    let mut step = 0;

    'epochs: for epoch in 0..cfg.schedule.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        if cfg.schedule.shuffle {
            order_rng.shuffle(&mut order);
        }
        for chunk in order.chunks(batch) {
            if step >= max_steps {
                break 'epochs;
            }
            let results: Vec<spgnn_model::Result<(LossBreakdown, ParamGrads)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = base.fork(2 + (step * batch + j) as u64);
                    let s = &data.samples[i];
                    let tape = Tape::new();
                    let l = detector.loss(&tape, &store, &s.image, graphs[i].as_ref(), &s.targets, &mut rng)?;
                    let g = tape.gradients(&l.total)?;
                    Ok((l.breakdown, g))
                })
                .collect();
            store.zero_grads();
            let mut mean = LossBreakdown::default();
            for r in results {
                let (b, g) = r.map_err(|e| diverged(e, step))?;
                mean.add(&b);
                store.accumulate(&g);
            }
            let scale = 1.0 / chunk.len() as f64;
            mean.scale(scale);
            for p in store.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            let norm = match o.clip_grad_norm {
                Some(c) => clip_grad_norm(&mut store, c),
                None => store.grad_norm(),
            };
            if !norm.is_finite() || !mean.total.is_finite() {
                return Err(HarnessError::Diverged { step });
            }
            opt.lr = learning_rate(cfg, step, epoch);
            opt.step(&mut store);
            let rec = StepRecord { step, epoch, lr: opt.lr, loss: mean };
            if let Some(w) = log.as_mut() {
                w.serialize(CsvRow {
                    step,
                    rpn_cls: mean.rpn_cls,
                    rpn_reg: mean.rpn_reg,
                    head_cls: mean.head_cls,
                    head_reg: mean.head_reg,
                    total: mean.total,
                })?;
                w.flush().map_err(io_err(out.unwrap().join(LOSS_LOG)))?;
            }
            on_step(&rec);
            trace.push(rec);
            step += 1;
        }
        if let Some(dir) = out {
            save_checkpoint(&dir.join(CHECKPOINT), &store, cfg, epoch, step)?;
        }
    }
    if let Some(dir) = out {
        if step >= max_steps {
            let epoch = trace.last().map_or(0, |r| r.epoch);
            save_checkpoint(&dir.join(CHECKPOINT), &store, cfg, epoch, step)?;
        }
    }
    Ok(Trained { detector, store, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_and_decays() {
        let mut cfg = RunConfig::default();
        cfg.optimizer.lr = Some(1.0);
        cfg.schedule.warmup_steps = 10;
        cfg.schedule.lr_decay_epochs = vec![2, 3];
        assert!((learning_rate(&cfg, 0, 0) - 0.1).abs() < 1e-12);
        assert!((learning_rate(&cfg, 5, 0) - 0.55).abs() < 1e-12);
        assert_eq!(learning_rate(&cfg, 10, 1), 1.0);
        assert!((learning_rate(&cfg, 50, 2) - 0.1).abs() < 1e-12);
        assert!((learning_rate(&cfg, 80, 3) - 0.01).abs() < 1e-12);
    }
}
