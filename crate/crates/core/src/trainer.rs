//! Optimisation loop, learning-rate schedule, evaluation driver and gate
//! statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datamodel::{augment, Batch, SamplePair};
use crate::metrics::{aggregate, MetricReport};
use crate::model::{GateSet, Grnet, ModelConfig};
use crate::nn::{BnUpdate, Ctx, Mode, ParamGroup, ParamKind, ParamStore};
use crate::objective::{batch_loss, LossReport};
use crate::tensor::Tensor;
use crate::{par, Error, Result};

/// Momentum of batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Learning rate after `step` of `total_steps` optimiser steps: linear warm-up
/// from 0 to `lr_max`, then linear decay to 0 at `total_steps`.
///
/// The warm-up ends at step `round(warmup_fraction · total_steps)`, clamped to
/// `1..total_steps`, where the rate is exactly `lr_max`.
pub fn lr_at(step: usize, total_steps: usize, lr_max: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps < 2 {
        return Err(Error::InvalidArgument("schedule needs at least 2 steps".into()));
    }
    if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "warmup_fraction {warmup_fraction} outside (0, 1)"
        )));
    }
    if step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let warm = warmup_steps(total_steps, warmup_fraction);
    Ok(if step <= warm {
        lr_max * (step as f64 / warm as f64)
    } else {
        lr_max * ((total_steps - step) as f64 / (total_steps - warm) as f64)
    })
}

/// Index of the step at which the warm-up peaks.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps.saturating_sub(1).max(1))
}

/// Optimiser and schedule settings. Model-side switches (including the loss
/// mode and augmentation) live in [`ModelConfig::flags`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Caps the run at this many optimiser steps when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr_backbone_max: f64,
    pub lr_other_max: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Crop side relative to the image side when augmenting.
    pub crop_fraction: f64,
    /// Re-estimate batch-norm statistics on the training set after the last step.
    pub bn_recalibration: bool,
    /// Worker threads; `Some(1)` is the strict single-threaded mode.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale schedule: batch 16, 30 epochs.
    pub fn paper() -> Self {
        Self {
            max_epochs: 30,
            max_steps: None,
            batch_size: 16,
            lr_backbone_max: 5e-3,
            lr_other_max: 5e-2,
            weight_decay: 5e-4,
            momentum: 0.9,
            warmup_fraction: 0.1,
            seed: 0,
            crop_fraction: 0.875,
            bn_recalibration: true,
            threads: None,
        }
    }

    /// Desk-scale schedule: batch 4, 300 steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            max_steps: Some(300),
            max_epochs: 1_000_000,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad(format!("crop_fraction {} outside (0, 1]", self.crop_fraction));
        }
        for (k, v) in [
            ("lr_backbone_max", self.lr_backbone_max),
            ("lr_other_max", self.lr_other_max),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be finite and non-negative"));
            }
        }
        if self.max_steps == Some(0) || self.max_epochs == 0 {
            return bad("run must contain at least one step".into());
        }
        Ok(())
    }

    pub fn lr_max(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone_max,
            ParamGroup::Other => self.lr_other_max,
        }
    }

    /// Total optimiser steps for a dataset of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size);
        let by_epochs = per_epoch.saturating_mul(self.max_epochs);
        self.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub loss: LossReport,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,lr_backbone,lr_other,bce,iou,edge_bce,total";

pub fn loss_log_csv(log: &[StepLog]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in log {
        let edge = r.loss.edge_bce.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.lr_backbone, r.lr_other, r.loss.bce, r.loss.iou, edge, r.loss.total
        )
        .unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// SGD with momentum and L2 weight decay (PyTorch semantics).
struct Sgd {
    velocity: BTreeMap<String, Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: impl Fn(ParamGroup) -> f64) {
        for (name, g) in grads {
            let p = store.get_mut(name).expect("gradient for a registered parameter");
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let rate = lr(p.group);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let w = p.value.data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gi + self.weight_decay * *wi;
                *vi = self.momentum * *vi + d;
                *wi -= rate * *vi;
            }
        }
    }
}

fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (name, batch) in [(&u.mean_name, &u.mean), (&u.var_name, &u.var)] {
            let r = store.get_mut(name).expect("running statistic").value.data_mut();
            for (ri, bi) in r.iter_mut().zip(batch) {
                *ri = (1.0 - BN_MOMENTUM) * *ri + BN_MOMENTUM * bi;
            }
        }
    }
}

fn prepare(data: &[SamplePair], size: usize) -> Vec<SamplePair> {
    data.iter()
        .map(|s| if s.size() == (size, size) { s.clone() } else { s.resized(size) })
        .collect()
}

fn sample_seed(seed: u64, step: usize, slot: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (slot as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Trains a freshly initialised model.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, data: &[SamplePair]) -> Result<TrainOutcome> {
    let net = Grnet::new(model)?;
    let params = net.init_params(cfg.seed);
    train_from(&net, params, cfg, data)
}

/// Trains starting from `params`.
pub fn train_from(net: &Grnet, mut params: ParamStore, cfg: &TrainConfig, data: &[SamplePair]) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate_params(&params)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let model = net.config();
    let flags = model.flags;
    let data = prepare(data, model.input_size);
    let total = cfg.total_steps(data.len());
    if total < 2 {
        return Err(Error::Config(format!("schedule has {total} step(s); need at least 2")));
    }
    let crop = ((model.input_size as f64 * cfg.crop_fraction).round() as usize).clamp(1, model.input_size);

    par::with_threads(cfg.threads, || {
        let mut sgd = Sgd {
            velocity: BTreeMap::new(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let mut log = Vec::with_capacity(total);
        let mut step = 0;
        let mut epoch = 0;
        while step < total {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                if step >= total {
                    break;
                }
                let samples: Vec<SamplePair> = if flags.augmentation {
                    chunk
                        .iter()
                        .enumerate()
                        .map(|(slot, &i)| augment(&data[i], crop, sample_seed(cfg.seed, step, slot)))
                        .collect::<Result<_>>()?
                } else {
                    chunk.iter().map(|&i| data[i].clone()).collect()
                };
                let batch = Batch::collate(&samples.iter().collect::<Vec<_>>())?;
                let lr_b = lr_at(step, total, cfg.lr_backbone_max, cfg.warmup_fraction)?;
                let lr_o = lr_at(step, total, cfg.lr_other_max, cfg.warmup_fraction)?;

                let mut cx = Ctx::new(&params, Mode::Train);
                let rgb = cx.input(batch.rgb.clone());
                let depth = cx.input(batch.depth.clone());
                let out = net.forward(&mut cx, rgb, depth)?;
                let edge = out.edge_logits.map(|e| (cx.value(e), &batch.edge));
                let loss = batch_loss(cx.value(out.logits), &batch.gt, flags.loss_mode, edge)?;
                if !loss.report.total.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        last: Box::new(Checkpoint {
                            model: model.clone(),
                            train: cfg.clone(),
                            step,
                            params: params.clone(),
                        }),
                    });
                }
                let mut seeds = vec![(out.logits, loss.grad_logits)];
                if let (Some(e), Some(g)) = (out.edge_logits, loss.grad_edge) {
                    seeds.push((e, g));
                }
                let grads = cx.tape.backward_multi(seeds);
                let named = cx.param_grads(&grads);
                let bn = cx.take_bn_updates();
                drop(cx);
                sgd.step(&mut params, &named, |g| match g {
                    ParamGroup::Backbone => lr_b,
                    ParamGroup::Other => lr_o,
                });
                apply_bn_updates(&mut params, &bn);
                log.push(StepLog {
                    step,
                    epoch,
                    lr_backbone: lr_b,
                    lr_other: lr_o,
                    loss: loss.report,
                });
                step += 1;
            }
            epoch += 1;
        }
        if cfg.bn_recalibration {
            recalibrate_bn(net, &mut params, &data, cfg.batch_size)?;
        }
        Ok(TrainOutcome {
            checkpoint: Checkpoint {
                model: model.clone(),
                train: cfg.clone(),
                step,
                params,
            },
            log,
        })
    })
}

/// Replaces running statistics with the average of batch statistics over
/// `data`, visited in order.
pub fn recalibrate_bn(net: &Grnet, params: &mut ParamStore, data: &[SamplePair], batch_size: usize) -> Result<()> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = Batch::collate(&chunk.iter().collect::<Vec<_>>())?;
        let mut cx = Ctx::new(params, Mode::Train);
        let rgb = cx.input(batch.rgb);
        let depth = cx.input(batch.depth);
        net.forward(&mut cx, rgb, depth)?;
        for u in cx.take_bn_updates() {
            for (name, v) in [(u.mean_name, u.mean), (u.var_name, u.var)] {
                let e = sums.entry(name).or_insert_with(|| (vec![0.0; v.len()], 0));
                e.0.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                e.1 += 1;
            }
        }
    }
    for (name, (sum, count)) in sums {
        let r = params.get_mut(&name).expect("running statistic").value.data_mut();
        for (ri, si) in r.iter_mut().zip(&sum) {
            *ri = si / count as f64;
        }
    }
    Ok(())
}

/// Batch size used for inference.
pub const EVAL_BATCH: usize = 8;

/// Per-sample outputs of inference over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Saliency probabilities, `[1, 1, s, s]` each.
    pub probs: Vec<Tensor>,
    pub gates: Option<Vec<GateSet>>,
}

fn model_from(checkpoint: &Checkpoint) -> Result<Grnet> {
    let net = Grnet::new(&checkpoint.model).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    net.validate_params(&checkpoint.params)?;
    Ok(net)
}

/// Eval-mode inference at the model input size.
pub fn infer(checkpoint: &Checkpoint, data: &[SamplePair]) -> Result<Inference> {
    let net = model_from(checkpoint)?;
    let data = prepare(data, checkpoint.model.input_size);
    let threads = checkpoint.train.threads;
    par::with_threads(threads, || {
        let mut probs = Vec::with_capacity(data.len());
        let mut gates = net.is_gated().then(Vec::new);
        for chunk in data.chunks(EVAL_BATCH) {
            let batch = Batch::collate(&chunk.iter().collect::<Vec<_>>())?;
            let pred = net.predict(&checkpoint.params, &batch.rgb, &batch.depth)?;
            probs.extend((0..pred.probs.n()).map(|i| pred.probs.select(i)));
            if let (Some(all), Some(g)) = (gates.as_mut(), pred.gates) {
                all.extend(g);
            }
        }
        Ok(Inference { probs, gates })
    })
}

/// Metrics of the checkpoint on `data` (ground truth at model input size).
pub fn evaluate(checkpoint: &Checkpoint, data: &[SamplePair]) -> Result<MetricReport> {
    Ok(evaluate_with_maps(checkpoint, data)?.0)
}

/// Like [`evaluate`], also returning the probability maps.
pub fn evaluate_with_maps(checkpoint: &Checkpoint, data: &[SamplePair]) -> Result<(MetricReport, Vec<Tensor>)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let inf = infer(checkpoint, data)?;
    let size = checkpoint.model.input_size;
    let pairs: Vec<(Tensor, Tensor)> = inf
        .probs
        .iter()
        .zip(data)
        .map(|(p, s)| (p.clone(), prepare(std::slice::from_ref(s), size).remove(0).gt))
        .collect();
    Ok((aggregate(&pairs)?, inf.probs))
}

pub const GATE_NAMES: [&str; 8] = ["Ga1", "Ga2", "Ga3", "Gb1", "Gb2", "Gb3", "Gr", "Gd"];

/// Mean gate values over one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub dataset: String,
    pub n_samples: usize,
    pub ga: [f64; 3],
    pub gb: [f64; 3],
    /// Absent when the edge-stream gates are disabled.
    pub gr: Option<f64>,
    pub gd: Option<f64>,
}

impl GateRow {
    fn from_sets(dataset: &str, sets: &[GateSet]) -> Self {
        let n = sets.len() as f64;
        let mean3 = |f: fn(&GateSet) -> [f64; 3]| {
            let mut m = [0.0; 3];
            for s in sets {
                m.iter_mut().zip(f(s)).for_each(|(a, b)| *a += b);
            }
            m.map(|v| v / n)
        };
        let mean_opt = |f: fn(&GateSet) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = sets.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / n)
        };
        Self {
            dataset: dataset.to_string(),
            n_samples: sets.len(),
            ga: mean3(|s| s.ga),
            gb: mean3(|s| s.gb),
            gr: mean_opt(|s| s.gr),
            gd: mean_opt(|s| s.gd),
        }
    }

    /// `Gb_l > Ga_l` per level.
    pub fn depth_dominant(&self) -> [bool; 3] {
        [0, 1, 2].map(|l| self.gb[l] > self.ga[l])
    }

    /// `Gd > Gr` when the edge gates exist.
    pub fn edge_depth_dominant(&self) -> Option<bool> {
        Some(self.gd? > self.gr?)
    }

    pub fn mean_gb(&self) -> f64 {
        self.gb.iter().sum::<f64>() / 3.0
    }

    pub fn mean_ga(&self) -> f64 {
        self.ga.iter().sum::<f64>() / 3.0
    }
}

/// Per-dataset and pooled (`ALL`) gate means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStatsReport {
    pub rows: Vec<GateRow>,
    pub overall: GateRow,
}

impl GateStatsReport {
    pub const CSV_HEADER: &'static str =
        "dataset,n,Ga1,Ga2,Ga3,Gb1,Gb2,Gb3,Gr,Gd,Gb1>Ga1,Gb2>Ga2,Gb3>Ga3,Gd>Gr";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            let dom = r.depth_dominant();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.dataset,
                r.n_samples,
                r.ga[0],
                r.ga[1],
                r.ga[2],
                r.gb[0],
                r.gb[1],
                r.gb[2],
                opt(r.gr),
                opt(r.gd),
                dom[0],
                dom[1],
                dom[2],
                r.edge_depth_dominant().map(|b| b.to_string()).unwrap_or_default()
            )
            .unwrap();
        }
        s
    }
}

/// Gate statistics of a gated checkpoint over named datasets.
pub fn gate_stats(checkpoint: &Checkpoint, datasets: &[(String, Vec<SamplePair>)]) -> Result<GateStatsReport> {
    let net = model_from(checkpoint)?;
    if !net.is_gated() {
        return Err(Error::GatingDisabled);
    }
    if datasets.is_empty() || datasets.iter().any(|(_, d)| d.is_empty()) {
        return Err(Error::EmptyInput("gate statistics need non-empty datasets"));
    }
    let mut rows = Vec::new();
    let mut pooled = Vec::new();
    for (name, data) in datasets {
        let sets = infer(checkpoint, data)?.gates.ok_or(Error::GatingDisabled)?;
        rows.push(GateRow::from_sets(name, &sets));
        pooled.extend(sets);
    }
    Ok(GateStatsReport {
        overall: GateRow::from_sets("ALL", &pooled),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_endpoints_and_peak() {
        let total = 1000;
        let warm = warmup_steps(total, 0.1);
        assert_eq!(warm, 100);
        assert_eq!(lr_at(0, total, 5e-3, 0.1).unwrap(), 0.0);
        assert_eq!(lr_at(warm, total, 5e-3, 0.1).unwrap(), 5e-3);
        assert_eq!(lr_at(warm, total, 5e-2, 0.1).unwrap(), 5e-2);
        assert_eq!(lr_at(total, total, 5e-2, 0.1).unwrap(), 0.0);
        assert_abs_diff_eq!(lr_at(550, total, 5e-2, 0.1).unwrap(), 2.5e-2, epsilon = 1e-15);
        assert!(matches!(
            lr_at(total + 1, total, 1.0, 0.1),
            Err(Error::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn schedule_never_exceeds_peak() {
        for total in [2, 3, 7, 50, 301] {
            let max = (0..=total)
                .map(|s| lr_at(s, total, 0.05, 0.1).unwrap())
                .fold(0.0, f64::max);
            assert_eq!(max, 0.05, "total {total}");
        }
    }

    #[test]
    fn total_steps_keeps_partial_batches() {
        let c = TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            max_steps: None,
            ..TrainConfig::desk()
        };
        assert_eq!(c.total_steps(10), 9);
        let c = TrainConfig {
            max_steps: Some(5),
            ..c
        };
        assert_eq!(c.total_steps(10), 5);
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut store = ParamStore::new();
        store.insert(
            "w",
            crate::nn::Param {
                value: Tensor::from_vec([1, 1, 1, 2], vec![1.0, -2.0]),
                group: ParamGroup::Other,
                kind: ParamKind::Trainable,
            },
        );
        let mut sgd = Sgd {
            velocity: BTreeMap::new(),
            momentum: 0.9,
            weight_decay: 0.1,
        };
        let g: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::from_vec([1, 1, 1, 2], vec![0.5, 0.5]))].into();
        sgd.step(&mut store, &g, |_| 0.1);
        // v = g + wd·w = [0.6, 0.3]; w -= 0.1·v
        let w = store.tensor("w").data().to_vec();
        assert_abs_diff_eq!(w[0], 0.94, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], -2.03, epsilon = 1e-12);
        sgd.step(&mut store, &g, |_| 0.1);
        // v = 0.9·0.6 + 0.5 + 0.1·0.94
        assert_abs_diff_eq!(store.tensor("w").data()[0], 0.94 - 0.1 * (0.54 + 0.5 + 0.094), epsilon = 1e-12);
    }
}
