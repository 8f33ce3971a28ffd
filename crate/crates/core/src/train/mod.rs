//! Training loop, evaluation and run reports.

pub mod config;
pub mod optim;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::synth::sample_seed;
use crate::data::{augment, normalize, stack, SegmentationSample};
use crate::error::{Error, Result};
use crate::loss::{sample_metrics, total_loss, LossConfig};
use crate::network::Model;
use crate::params::Session;
use crate::tensor::Graph;

pub use config::RunConfig;
pub use optim::{adam_update, Adam, OptimConfig};

/// Batch size for every evaluation pass. Fixed so that metrics never depend
/// on the caller's training batch size.
pub const EVAL_BATCH: usize = 8;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_TXT: &str = "report.txt";

/// Mean loss, IoU and F1 over a sample set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub iou: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub config: RunConfig,
    pub parameters: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation metrics of the best (checkpointed) epoch.
    pub best: Metrics,
    /// Validation metrics after the last epoch.
    pub final_metrics: Metrics,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\tval_iou\tval_f1\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.train_loss, e.val.loss, e.val.iou, e.val.f1
            ));
        }
        s
    }
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:>10}  {:>10}  {:>7}  {:>7}", "epoch", "train loss", "val loss", "val IoU", "val F1")?;
        for e in &self.epochs {
            writeln!(
                f,
                "{:>5}  {:>10.5}  {:>10.5}  {:>7.4}  {:>7.4}",
                e.epoch, e.train_loss, e.val.loss, e.val.iou, e.val.f1
            )?;
        }
        writeln!(f, "parameters: {}", self.parameters)?;
        writeln!(
            f,
            "best epoch {}: val IoU {:.4}, F1 {:.4}, loss {:.5}",
            self.best_epoch, self.best.iou, self.best.f1, self.best.loss
        )?;
        write!(
            f,
            "final: val IoU {:.4}, F1 {:.4}, loss {:.5}",
            self.final_metrics.iou, self.final_metrics.f1, self.final_metrics.loss
        )
    }
}

/// Result of [`train`]: the report plus f32-rounded snapshots of the best
/// and the last epoch. Their metrics are exactly the ones reported.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: Model,
    pub last: Model,
}

/// The image as the network sees it: optionally augmented, then normalized.
pub fn prepare(s: &SegmentationSample, augment_seed: Option<u64>) -> SegmentationSample {
    match augment_seed {
        Some(seed) => augment(s, seed),
        None => SegmentationSample {
            id: s.id.clone(),
            image: normalize(&s.image),
            mask: s.mask.clone(),
        },
    }
}

fn non_finite(g: &Graph, detail: String) -> Error {
    let op = g.first_non_finite().map_or("unknown", |(_, op)| op);
    Error::NonFinite {
        op: op.to_string(),
        detail,
    }
}

/// Eval-mode metrics; BN running statistics are read, never written.
pub fn evaluate(model: &Model, samples: &[SegmentationSample], loss_cfg: &LossConfig) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on zero samples".into()));
    }
    let mut buffers = model.buffers.clone();
    let (mut loss, mut iou, mut f1) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(EVAL_BATCH) {
        let prepared: Vec<SegmentationSample> = chunk.iter().map(|s| prepare(s, None)).collect();
        let refs: Vec<&SegmentationSample> = prepared.iter().collect();
        let (x, y) = stack(&refs)?;
        let mut s = Session::new(&model.params, &mut buffers, false, false, 0);
        let xv = s.graph.constant(x);
        let yv = s.graph.constant(y.clone());
        let logits = model.net.forward(&mut s, xv)?;
        let l = total_loss(&mut s.graph, logits, yv, loss_cfg)?;
        let lv = s.graph.value(l).item();
        if !lv.is_finite() {
            return Err(non_finite(&s.graph, format!("evaluating batch starting at {}", chunk[0].id)));
        }
        loss += lv * chunk.len() as f64;
        for (i, f) in sample_metrics(s.graph.value(logits), &y, loss_cfg.threshold) {
            iou += i;
            f1 += f;
        }
    }
    let n = samples.len() as f64;
    Ok(Metrics {
        loss: loss / n,
        iou: iou / n,
        f1: f1 / n,
    })
}

/// Loads a checkpoint for `cfg` and evaluates it.
pub fn evaluate_checkpoint(
    path: impl AsRef<Path>,
    cfg: &RunConfig,
    samples: &[SegmentationSample],
) -> Result<Metrics> {
    let mut model = Model::new(&cfg.network, cfg.optim.seed)?;
    checkpoint::load_into(path, &mut model)?;
    evaluate(&model, samples, &cfg.loss)
}

fn snapshot(model: &Model) -> Model {
    let mut m = model.clone();
    m.params.round_to_f32();
    m.buffers.round_to_f32();
    m
}

fn check_disjoint(train: &[SegmentationSample], val: &[SegmentationSample]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let ids: HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| ids.contains(s.id.as_str())) {
        return Err(Error::InvalidArgument(format!(
            "sample {} is in both the training and validation sets",
            s.id
        )));
    }
    Ok(())
}

/// [`train_with`] without a progress callback.
pub fn train(
    cfg: &RunConfig,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(cfg, train_set, val_set, out_dir, |_| {})
}

/// Trains from a fresh seeded model. Each epoch reshuffles with
/// `(seed, epoch)`, takes one Adam step per batch and then evaluates an
/// f32-rounded snapshot on `val_set`. With `out_dir` the best snapshot is
/// written as [`CHECKPOINT_FILE`] next to the config and reports.
pub fn train_with(
    cfg: &RunConfig,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_disjoint(train_set, val_set)?;
    let o = &cfg.optim;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    }

    let mut model = Model::new(&cfg.network, o.seed)?;
    let mut adam = Adam::new(&model.params);
    let mut records = Vec::with_capacity(o.epochs);
    let mut best: Option<(usize, Metrics, Model)> = None;
    let mut last = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=o.epochs {
        let epoch_seed = sample_seed(o.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(o.batch_size).enumerate() {
            let prepared: Vec<SegmentationSample> = batch
                .iter()
                .map(|&i| {
                    let aug = o.augment.then(|| sample_seed(epoch_seed, i as u64));
                    prepare(&train_set[i], aug)
                })
                .collect();
            let refs: Vec<&SegmentationSample> = prepared.iter().collect();
            let (x, y) = stack(&refs)?;
            let where_ = || format!("epoch {epoch}, step {}", step + 1);

            let mut s = Session::new(
                &model.params,
                &mut model.buffers,
                true,
                true,
                sample_seed(epoch_seed, (1 << 32) + step as u64),
            );
            let xv = s.graph.constant(x);
            let yv = s.graph.constant(y);
            let logits = model.net.forward(&mut s, xv)?;
            let loss = total_loss(&mut s.graph, logits, yv, &cfg.loss)?;
            let lv = s.graph.value(loss).item();
            if !lv.is_finite() {
                return Err(non_finite(&s.graph, format!("training loss at {}", where_())));
            }
            let grads = s.backward(loss)?;
            drop(s);
            for (p, g) in model.params.iter().zip(&grads) {
                if g.as_ref().is_some_and(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        op: "backward".into(),
                        detail: format!("gradient of {} at {}", p.name, where_()),
                    });
                }
            }
            adam.step(&mut model.params, &grads, o)?;
            loss_sum += lv * batch.len() as f64;
        }

        let snap = snapshot(&model);
        let val = evaluate(&snap, val_set, &cfg.loss)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val,
        };
        on_epoch(&rec);
        records.push(rec);
        if best.as_ref().is_none_or(|(_, m, _)| val.iou > m.iou) {
            if let Some(dir) = out_dir {
                checkpoint::save(dir.join(CHECKPOINT_FILE), &snap)?;
            }
            best = Some((epoch, val, snap.clone()));
        }
        last = Some((val, snap));
    }

    let (best_epoch, best_metrics, best_model) = best.expect("at least one epoch");
    let (final_metrics, last_model) = last.expect("at least one epoch");
    let report = TrainReport {
        config: cfg.clone(),
        parameters: model.count_parameters(),
        epochs: records,
        best_epoch,
        best: best_metrics,
        final_metrics,
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join(REPORT_TSV), report.to_tsv())?;
        fs::write(dir.join(REPORT_TXT), format!("{report}\n"))?;
    }
    Ok(TrainOutcome {
        report,
        best: best_model,
        last: last_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::network::NetworkConfig;
    use crate::params::ParamGroup;

    fn tiny_cfg(epochs: usize) -> RunConfig {
        let mut c = RunConfig::default();
        c.network = NetworkConfig {
            embed_dims: [2, 3, 4, 5, 6],
            man_depths: [1, 1, 1],
            msab_kernels: vec![1, 3],
            ..NetworkConfig::desk()
        };
        c.optim.epochs = epochs;
        c.optim.batch_size = 3;
        c.optim.base_lr = 1e-2;
        c
    }

    fn data() -> (Vec<SegmentationSample>, Vec<SegmentationSample>) {
        let spec = DatasetSpec {
            n_samples: 6,
            size: 32,
            ..DatasetSpec::default()
        };
        let all = generate_dataset(&spec).unwrap();
        (all[..4].to_vec(), all[4..].to_vec())
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (tr, va) = data();
        let a = train(&tiny_cfg(2), &tr, &va, None).unwrap();
        let b = train(&tiny_cfg(2), &tr, &va, None).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.best.params, b.best.params);
        assert_eq!(a.report.epochs.len(), 2);
    }

    #[test]
    fn report_metrics_are_reproduced_by_evaluate() {
        let (tr, va) = data();
        let cfg = tiny_cfg(3);
        let out = train(&cfg, &tr, &va, None).unwrap();
        assert_eq!(evaluate(&out.last, &va, &cfg.loss).unwrap(), out.report.final_metrics);
        assert_eq!(evaluate(&out.best, &va, &cfg.loss).unwrap(), out.report.best);
        let best = &out.report.epochs[out.report.best_epoch - 1];
        assert_eq!(best.val, out.report.best);
        assert!(out.report.epochs.iter().all(|e| e.val.iou <= out.report.best.iou));
    }

    #[test]
    fn zero_loss_weights_leave_parameters_unchanged() {
        let (tr, va) = data();
        let mut cfg = tiny_cfg(2);
        cfg.loss.lambda_dice = 0.0;
        cfg.loss.lambda_bce = 0.0;
        let out = train(&cfg, &tr, &va, None).unwrap();
        assert!(out.report.epochs.iter().all(|e| e.train_loss == 0.0));
        let mut init = Model::new(&cfg.network, cfg.optim.seed).unwrap();
        init.params.round_to_f32();
        assert_eq!(out.last.params, init.params);
    }

    #[test]
    fn zero_multiplier_freezes_pagf() {
        let (tr, va) = data();
        let mut cfg = tiny_cfg(2);
        cfg.optim.lr_mult.insert(ParamGroup::Pagf, 0.0);
        let out = train(&cfg, &tr, &va, None).unwrap();
        let mut init = Model::new(&cfg.network, cfg.optim.seed).unwrap();
        init.params.round_to_f32();
        let mut moved = 0;
        for (a, b) in out.last.params.iter().zip(init.params.iter()) {
            if a.group == ParamGroup::Pagf {
                assert_eq!(a.value, b.value, "{}", a.name);
            } else if a.value != b.value {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn nan_input_aborts_with_op_name() {
        let (mut tr, va) = data();
        tr[1].image.data_mut()[5] = f64::NAN;
        let mut cfg = tiny_cfg(1);
        cfg.optim.augment = false;
        match train(&cfg, &tr, &va, None) {
            Err(Error::NonFinite { op, detail }) => {
                assert!(!op.is_empty() && op != "unknown", "{op}");
                assert!(detail.contains("epoch 1"), "{detail}");
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let (tr, _) = data();
        assert!(train(&tiny_cfg(1), &tr, &tr[..1], None).is_err());
    }

    #[test]
    fn writes_checkpoint_config_and_reports() {
        let (tr, va) = data();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(2);
        let out = train(&cfg, &tr, &va, Some(dir.path())).unwrap();
        let back = RunConfig::load(dir.path().join(CONFIG_FILE)).unwrap();
        let m = evaluate_checkpoint(dir.path().join(CHECKPOINT_FILE), &back, &va).unwrap();
        assert_eq!(m, out.report.best);
        let tsv = fs::read_to_string(dir.path().join(REPORT_TSV)).unwrap();
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.starts_with("epoch\ttrain_loss"));
    }
}
