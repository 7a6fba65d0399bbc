//! Cross-table pretraining, task calibration and refinement.
//!
//! All phases run minibatch AdamW on the task loss of one dataset at a time and
//! differ only in which parameters are trainable and how the learning rate is
//! scheduled. Downstream phases keep the best validation state, counting the
//! state they started from.

pub mod checkpoint;

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Setting, SplitKind};
use crate::error::{Error, Result};
use crate::eval::{score, Metric};
use crate::model::{Assembly, DatasetId};
use crate::nn::{compute_loss, AdamW, AdamWConfig, Graph, ParamId, Scope};

pub use checkpoint::{
    load_checkpoint, load_shared, save_checkpoint, Checkpoint, CheckpointHeader, Dtype, ProvenanceEntry, RngState,
};

pub const DEFAULT_BATCH_SIZE: usize = 1024;
pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-5;
pub const WARMUP_FRACTION: f64 = 0.2;
pub const CALIBRATION_EPOCHS_FULL: usize = 240;
pub const CALIBRATION_EPOCHS_LIMITED: usize = 40;
pub const REFINEMENT_EPOCHS: usize = 5;
pub const PRETRAIN_EPOCHS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Calibrate,
    Refine,
    /// Every parameter trained from initialization on one dataset.
    Scratch,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Calibrate => "calibrate",
            Phase::Refine => "refine",
            Phase::Scratch => "scratch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub phase: Phase,
    /// Passes over the training split; for pretraining, expected passes per dataset.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Overrides the pretraining step count derived from `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_total: Option<usize>,
}

impl PhaseSpec {
    pub fn new(phase: Phase, epochs: usize) -> Self {
        Self {
            phase,
            epochs,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            steps_total: None,
        }
    }

    pub fn pretrain() -> Self {
        Self::new(Phase::Pretrain, PRETRAIN_EPOCHS)
    }

    /// 240 epochs on full data, 40 under the limited-data settings.
    pub fn calibrate(setting: Setting) -> Self {
        let epochs = if setting.is_limited() {
            CALIBRATION_EPOCHS_LIMITED
        } else {
            CALIBRATION_EPOCHS_FULL
        };
        Self::new(Phase::Calibrate, epochs)
    }

    pub fn refine() -> Self {
        Self::new(Phase::Refine, REFINEMENT_EPOCHS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{} batch_size must be positive", self.phase)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "{} lr and weight_decay must be finite and non-negative",
                self.phase
            )));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        })
    }
}

/// Linear warmup over the first `warmup` fraction of steps, then linear decay to
/// zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base: f64, warmup: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Usage("learning-rate schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Usage(format!("step {step} beyond schedule of {total_steps}")));
    }
    let (s, t) = (step as f64, total_steps as f64);
    let w = warmup * t;
    Ok(if s < w {
        base * s / w
    } else if w >= t {
        base
    } else {
        base * (t - s) / (t - w)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub dataset: Option<String>,
    /// 0 is the state before any update.
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: Option<f64>,
    pub valid_metric: f64,
    pub metric: Metric,
    /// Base learning rate of the shared body and effective rate of the
    /// dataset-specific parts at the end of the epoch.
    pub lr_shared: f64,
    pub lr_dataset: f64,
    /// Parameters whose bytes changed during the epoch.
    pub changed: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line. Wall time is zeroed when `with_wall_time` is
    /// false so that logs of identical runs compare equal byte for byte.
    pub fn to_jsonl(&self, with_wall_time: bool) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let mut r = r.clone();
            if !with_wall_time {
                r.wall_time_s = 0.0;
            }
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }
}

/// Outcome of one phase. On divergence the assembly holds the last good state.
#[derive(Debug)]
pub struct PhaseReport {
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub steps: usize,
    pub diverged: Option<Error>,
    pub rng: RngState,
}

impl PhaseReport {
    pub fn into_result(self) -> Result<Self> {
        match self.diverged {
            Some(e) => Err(e),
            None => Ok(self),
        }
    }
}

fn dataset_id(assembly: &Assembly, bundle: &DatasetBundle) -> Result<DatasetId> {
    assembly
        .find(bundle.name())
        .ok_or_else(|| Error::Usage(format!("dataset `{}` is not attached to the model", bundle.name())))
}

struct Snapshot(Vec<(ParamId, Vec<f64>)>);

impl Snapshot {
    fn take(assembly: &Assembly, ids: &[ParamId]) -> Self {
        Self(ids.iter().map(|&id| (id, assembly.params.get(id).tensor.data().to_vec())).collect())
    }

    fn restore(&self, assembly: &mut Assembly) {
        for (id, v) in &self.0 {
            assembly.params.get_mut(*id).tensor.data_mut().copy_from_slice(v);
        }
    }
}

fn digests(assembly: &Assembly) -> Vec<[u8; 32]> {
    assembly.params.digests()
}

fn changed_names(assembly: &Assembly, before: &[[u8; 32]]) -> Vec<String> {
    let after = digests(assembly);
    assembly
        .params
        .iter()
        .filter(|(id, _)| before.get(id.0) != after.get(id.0))
        .map(|(_, p)| p.name.clone())
        .collect()
}

/// One optimizer step on a minibatch. Returns the batch loss.
fn train_step<F>(
    assembly: &mut Assembly,
    id: DatasetId,
    bundle: &DatasetBundle,
    rows: &[usize],
    opt: &mut AdamW,
    lr_scale: F,
) -> Result<f64>
where
    F: Fn(&crate::nn::Parameter) -> f64,
{
    let (batch, targets) = bundle.batch(rows)?;
    let grads = {
        let mut g = Graph::new(&assembly.params);
        let pred = assembly.forward(&mut g, id, &batch)?;
        let loss = compute_loss(&mut g, pred, &targets, bundle.task())?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        (g.backward(loss)?, value)
    };
    opt.step(&mut assembly.params, &grads.0, lr_scale)?;
    Ok(grads.1)
}

fn diverged(step: usize, e: Error) -> Result<Error> {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Ok(Error::Diverged {
            step,
            reason: e.to_string(),
        }),
        other => Err(other),
    }
}

fn rng_state(rng: &ChaCha8Rng, seed: u64) -> RngState {
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

/// Cross-table pretraining. Each step draws a dataset uniformly and trains one
/// minibatch of it. Every parameter is trainable; the dataset-specific parts
/// follow the warmup/decay schedule while the shared body uses the base rate.
pub fn pretrain(assembly: &mut Assembly, suite: &[DatasetBundle], spec: &PhaseSpec) -> Result<PhaseReport> {
    spec.validate()?;
    if suite.is_empty() {
        return Err(Error::Usage("pretraining needs at least one dataset".into()));
    }
    let ids = suite.iter().map(|b| dataset_id(assembly, b)).collect::<Result<Vec<_>>>()?;
    let trains: Vec<Vec<usize>> = suite
        .iter()
        .map(|b| b.split_indices(SplitKind::Train).map(<[usize]>::to_vec))
        .collect::<Result<_>>()?;
    if let Some(b) = suite.iter().zip(&trains).find(|(_, t)| t.is_empty()).map(|(b, _)| b) {
        return Err(Error::Data(format!("dataset `{}` has no training rows", b.name())));
    }
    let batches_per_epoch: usize = trains.iter().map(|t| t.len().div_ceil(spec.batch_size)).sum();
    let total = spec.steps_total.unwrap_or(spec.epochs * batches_per_epoch);
    let log_every = if spec.steps_total.is_some() || spec.epochs == 0 {
        total.max(1)
    } else {
        batches_per_epoch
    };
    assembly.params.set_all_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = spec.optimizer();
    let mut cursors: Vec<(Vec<usize>, usize)> = trains
        .iter()
        .map(|t| {
            let mut order = t.clone();
            order.shuffle(&mut rng);
            (order, 0)
        })
        .collect();
    let all: Vec<ParamId> = assembly.params.ids().collect();
    let mut last_good = Snapshot::take(assembly, &all);
    let mut log = TrainLog::default();
    let mut before = digests(assembly);
    let mut losses = Vec::new();
    let start = Instant::now();
    let mut diverge = None;
    let mut epoch = 0;

    for step in 0..total {
        let k = rng.random_range(0..suite.len());
        let (order, pos) = &mut cursors[k];
        if *pos >= order.len() {
            order.shuffle(&mut rng);
            *pos = 0;
        }
        let end = (*pos + spec.batch_size).min(order.len());
        let rows = order[*pos..end].to_vec();
        *pos = end;
        let dataset_lr = lr_at(step, total, 1.0, WARMUP_FRACTION)?;
        let scale = |p: &crate::nn::Parameter| match p.scope {
            Scope::Shared => 1.0,
            Scope::Dataset(_) => dataset_lr,
        };
        match train_step(assembly, ids[k], &suite[k], &rows, &mut opt, scale) {
            Ok(l) => losses.push(l),
            Err(e) => {
                diverge = Some(diverged(step, e)?);
                last_good.restore(assembly);
                break;
            }
        }
        if (step + 1) % log_every == 0 || step + 1 == total {
            epoch += 1;
            let mut valid = Vec::with_capacity(suite.len());
            for (b, &id) in suite.iter().zip(&ids) {
                if !b.split_indices(SplitKind::Valid)?.is_empty() {
                    valid.push(crate::eval::validation_loss(assembly, id, b)?);
                }
            }
            let n = losses.len().max(1) as f64;
            log.records.push(EpochRecord {
                phase: Phase::Pretrain,
                dataset: None,
                epoch,
                steps: step + 1,
                train_loss: Some(losses.iter().sum::<f64>() / n),
                valid_metric: valid.iter().sum::<f64>() / valid.len().max(1) as f64,
                metric: Metric::Loss,
                lr_shared: spec.lr,
                lr_dataset: spec.lr * lr_at(step + 1, total, 1.0, WARMUP_FRACTION)?,
                changed: changed_names(assembly, &before),
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            losses.clear();
            before = digests(assembly);
            last_good = Snapshot::take(assembly, &all);
        }
    }
    if diverge.is_none() && total > 0 {
        assembly.shared_trained = true;
    }
    let last = log.records.last();
    Ok(PhaseReport {
        best_epoch: last.map_or(0, |r| r.epoch),
        best_metric: last.map_or(f64::NAN, |r| r.valid_metric),
        log,
        steps: opt.steps() as usize,
        diverged: diverge,
        rng: rng_state(&rng, spec.seed),
    })
}

/// Trains only the dataset-specific parts and the shared normalization
/// parameters against a frozen pretrained body.
pub fn calibrate(assembly: &mut Assembly, bundle: &DatasetBundle, spec: &PhaseSpec) -> Result<PhaseReport> {
    if !assembly.shared_trained {
        return Err(Error::Usage(
            "calibration needs a pretrained shared body; run pretraining or load a checkpoint".into(),
        ));
    }
    let id = dataset_id(assembly, bundle)?;
    let part = assembly.partition_parameters(id)?;
    let mut allowed = part.dataset.clone();
    allowed.extend(&part.shared_norm);
    fine_tune(assembly, id, bundle, spec, Phase::Calibrate, &allowed)
}

/// Short all-parameter fine-tuning after calibration.
pub fn refine(assembly: &mut Assembly, bundle: &DatasetBundle, spec: &PhaseSpec) -> Result<PhaseReport> {
    let id = dataset_id(assembly, bundle)?;
    let part = assembly.partition_parameters(id)?;
    let mut allowed = part.dataset.clone();
    allowed.extend(part.shared());
    fine_tune(assembly, id, bundle, spec, Phase::Refine, &allowed)
}

/// Trains shared body and dataset parts together on a single dataset, the
/// baseline that downstream transfer is compared against.
pub fn train_from_scratch(assembly: &mut Assembly, bundle: &DatasetBundle, spec: &PhaseSpec) -> Result<PhaseReport> {
    let id = dataset_id(assembly, bundle)?;
    let part = assembly.partition_parameters(id)?;
    let mut allowed = part.dataset.clone();
    allowed.extend(part.shared());
    fine_tune(assembly, id, bundle, spec, Phase::Scratch, &allowed)
}

/// Whether `candidate` strictly improves on `best` under the metric's orientation.
pub fn is_better(metric: Metric, candidate: f64, best: f64) -> bool {
    if metric.higher_is_better() {
        candidate > best
    } else {
        candidate < best
    }
}

fn fine_tune(
    assembly: &mut Assembly,
    id: DatasetId,
    bundle: &DatasetBundle,
    spec: &PhaseSpec,
    phase: Phase,
    trainable: &[ParamId],
) -> Result<PhaseReport> {
    spec.validate()?;
    let train = bundle.split_indices(SplitKind::Train)?.to_vec();
    if train.is_empty() {
        return Err(Error::Data(format!("dataset `{}` has no training rows", bundle.name())));
    }
    assembly.params.set_all_trainable(false);
    assembly.params.set_trainable(trainable, true);
    let result = run_epochs(assembly, id, bundle, spec, phase, trainable, train);
    assembly.params.set_all_trainable(true);
    result
}

fn run_epochs(
    assembly: &mut Assembly,
    id: DatasetId,
    bundle: &DatasetBundle,
    spec: &PhaseSpec,
    phase: Phase,
    trainable: &[ParamId],
    mut train: Vec<usize>,
) -> Result<PhaseReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = spec.optimizer();
    let initial = score(assembly, id, bundle, SplitKind::Valid)?;
    let metric = initial.metric;
    let mut best = (0, initial.value, Snapshot::take(assembly, trainable));
    let mut log = TrainLog::default();
    let record = |epoch, steps, train_loss, valid_metric, changed| EpochRecord {
        phase,
        dataset: Some(bundle.name().to_string()),
        epoch,
        steps,
        train_loss,
        valid_metric,
        metric,
        lr_shared: spec.lr,
        lr_dataset: spec.lr,
        changed,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    log.records.push(record(0, 0, None, initial.value, Vec::new()));
    let mut diverge = None;
    let mut last_good = Snapshot::take(assembly, trainable);
    let mut step = 0;

    'epochs: for epoch in 1..=spec.epochs {
        let before = digests(assembly);
        train.shuffle(&mut rng);
        let mut losses = Vec::new();
        for rows in train.chunks(spec.batch_size) {
            match train_step(assembly, id, bundle, rows, &mut opt, |_| 1.0) {
                Ok(l) => losses.push(l),
                Err(e) => {
                    diverge = Some(diverged(step, e)?);
                    last_good.restore(assembly);
                    break 'epochs;
                }
            }
            step += 1;
        }
        let valid = score(assembly, id, bundle, SplitKind::Valid)?;
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log.records.push(record(
            epoch,
            step,
            Some(train_loss),
            valid.value,
            changed_names(assembly, &before),
        ));
        last_good = Snapshot::take(assembly, trainable);
        if is_better(metric, valid.value, best.1) {
            best = (epoch, valid.value, Snapshot::take(assembly, trainable));
        }
    }
    best.2.restore(assembly);
    Ok(PhaseReport {
        log,
        best_epoch: best.0,
        best_metric: best.1,
        steps: step,
        diverged: diverge,
        rng: rng_state(&rng, spec.seed),
    })
}

/// SHA-256 digest of every parameter, keyed by name.
pub fn parameter_digests(assembly: &Assembly) -> HashMap<String, [u8; 32]> {
    assembly.params.iter().map(|(_, p)| (p.name.clone(), p.digest())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let base = 2.0;
        assert!((lr_at(10, 100, base, 0.2).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(lr_at(20, 100, base, 0.2).unwrap(), base);
        assert!((lr_at(60, 100, base, 0.2).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(lr_at(0, 100, base, 0.2).unwrap(), 0.0);
        assert_eq!(lr_at(100, 100, base, 0.2).unwrap(), 0.0);
        assert!(matches!(lr_at(0, 0, base, 0.2), Err(Error::Usage(_))));
    }

    #[test]
    fn lr_schedule_peaks_at_boundary() {
        let total = 37;
        let values: Vec<f64> = (0..=total).map(|s| lr_at(s, total, 1.0, 0.2).unwrap()).collect();
        let peak = values.iter().cloned().fold(f64::MIN, f64::max);
        assert!(peak <= 1.0);
        for w in values.windows(2) {
            assert!((w[1] - w[0]).abs() <= 1.0 / (0.2 * total as f64) + 1e-12);
        }
        assert_eq!(lr_at(100, 100, 1.0, 0.2).unwrap(), 0.0);
        assert_eq!(lr_at(20, 100, 1.0, 0.2).unwrap(), 1.0);
    }

    #[test]
    fn phase_defaults() {
        assert_eq!(PhaseSpec::calibrate(Setting::Full).epochs, 240);
        assert_eq!(PhaseSpec::calibrate(Setting::T100).epochs, 40);
        let r = PhaseSpec::refine();
        assert_eq!((r.epochs, r.batch_size, r.lr, r.weight_decay), (5, 1024, 1e-4, 1e-5));
    }
}
