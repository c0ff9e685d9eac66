//! Epoch loops for both training stages, evaluation over sampled negatives,
//! and early stopping.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Sequence, SequenceSet, Split};
use crate::metrics::{rank_of, sample_negatives, RankingAccumulator, RankingMetrics};
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, ParamStore, Tape};
use crate::rng::{self, stream};
use crate::stkg::{Stkg, Subgraph};
use crate::student::{soften_logits, soften_probs, Mode, SpatialPart, Student};
use crate::teacher::Teacher;
use crate::{Error, Result};

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoKd,
    NoSp,
    NoSpKd,
    NoC,
    NoF,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoKd, Variant::NoSp, Variant::NoSpKd, Variant::NoC, Variant::NoF];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKd => "no_kd",
            Variant::NoSp => "no_sp",
            Variant::NoSpKd => "no_sp_kd",
            Variant::NoC => "no_c",
            Variant::NoF => "no_f",
        }
    }

    pub fn distills(self) -> bool {
        !matches!(self, Variant::NoKd | Variant::NoSpKd)
    }

    pub fn removed(self) -> &'static [SpatialPart] {
        match self {
            Variant::Full | Variant::NoKd => &[],
            Variant::NoSp | Variant::NoSpKd => &[SpatialPart::Region, SpatialPart::Distance, SpatialPart::Projection],
            Variant::NoC => &[SpatialPart::Region],
            Variant::NoF => &[SpatialPart::Distance],
        }
    }

    pub fn apply(self, student: &mut Student) {
        for &part in self.removed() {
            student.remove_spatial(part);
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(alloc::format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Cutoff of the NDCG used for early stopping.
    pub monitor_k: usize,
    pub negatives: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            patience: 5,
            seed: 42,
            adam: AdamConfig::default(),
            monitor_k: 10,
            negatives: crate::metrics::DEFAULT_NEGATIVES,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.monitor_k == 0 || self.negatives == 0 {
            return Err(Error::Config("batch size, patience, monitor cutoff and negatives must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Indices `0..len` shuffled for `epoch` and cut into batches.
pub fn shuffled_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::derived(seed, &[stream::SHUFFLE, epoch as u64]));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, waited: 0 }
    }

    /// Records the monitored value of `epoch`; only a strict increase counts.
    pub fn observe(&mut self, epoch: usize, value: f64) -> Progress {
        match self.best {
            Some((_, b)) if !(value > b) => {
                self.waited += 1;
                if self.waited >= self.patience {
                    Progress::Stop
                } else {
                    Progress::Waiting
                }
            }
            _ => {
                self.best = Some((epoch, value));
                self.waited = 0;
                Progress::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Ranks each case's target against sampled negatives. `score` maps a batch
/// to row-major `[B, V+1]` scores.
pub fn evaluate_cases<F>(
    cases: &[&Sequence],
    purchased: &[Vec<u32>],
    num_takeaways: usize,
    ks: &[usize],
    negatives: usize,
    seed: u64,
    batch_size: usize,
    mut score: F,
) -> Result<RankingMetrics>
where
    F: FnMut(&[&Sequence]) -> Result<Vec<f64>>,
{
    let width = num_takeaways + 1;
    let mut acc = RankingAccumulator::new(ks)?;
    for chunk in cases.chunks(batch_size.max(1)) {
        let scores = score(chunk)?;
        if scores.len() != chunk.len() * width {
            return Err(Error::shape("evaluate", alloc::format!("{} scores for {} cases", scores.len(), chunk.len())));
        }
        for (row, seq) in scores.chunks(width).zip(chunk) {
            let bought = purchased.get(seq.user as usize).map(Vec::as_slice).unwrap_or(&[]);
            let neg = sample_negatives(seed, seq.user, num_takeaways, bought, seq.target, negatives)?;
            let neg_scores: Vec<f64> = neg.items.iter().map(|&x| row[x as usize]).collect();
            acc.add(rank_of(row[seq.target as usize], &neg_scores)?, neg.short);
        }
    }
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Epochs actually run.
    pub epochs: usize,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_valid_ndcg: f64,
    pub history: Vec<EpochRecord>,
    /// Joint loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
}

fn split_cases(data: &SequenceSet, split: Split) -> Vec<&Sequence> {
    data.split(split).collect()
}

/// One subgraph per sequence, indexed by sequence id.
pub fn sample_subgraphs(teacher: &Teacher, data: &SequenceSet, graph: &Stkg, seed: u64) -> Result<Vec<Subgraph>> {
    data.sequences.iter().enumerate().map(|(i, s)| teacher.sample(s, graph, seed).map_err(|e| e.in_sample(i))).collect()
}

fn teacher_scores(teacher: &Teacher, subgraphs: &[Subgraph], batch: &[&Sequence]) -> Result<Vec<f64>> {
    let sg: Vec<Subgraph> = batch.iter().map(|s| subgraphs[s.id as usize].clone()).collect();
    Ok(teacher.infer(&sg)?.logits)
}

/// Pre-trains the teacher on next-takeaway prediction over training
/// prefixes, keeping the parameters with the best validation NDCG.
/// `subgraphs` comes from [`sample_subgraphs`]. On a non-finite loss the
/// best parameters so far are restored before the error is returned.
pub fn pretrain_teacher(
    teacher: &mut Teacher,
    data: &SequenceSet,
    subgraphs: &[Subgraph],
    schedule: &Schedule,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if subgraphs.len() != data.sequences.len() {
        return Err(Error::invalid("one subgraph per sequence required"));
    }
    let train = split_cases(data, Split::Train);
    let valid = split_cases(data, Split::Valid);
    let v = teacher.num_takeaways();
    run_epochs(
        teacher,
        train.len(),
        schedule,
        |t, batch, _| {
            let sg: Vec<Subgraph> = batch.iter().map(|&i| subgraphs[train[i].id as usize].clone()).collect();
            let targets: Vec<u32> = batch.iter().map(|&i| train[i].target).collect();
            let mut tape = Tape::new();
            let (loss, _) = t.pretrain_loss(&mut tape, &sg, &targets)?;
            Ok((tape.scalar(loss), tape.backward(loss)?))
        },
        |t| {
            evaluate_cases(
                &valid,
                &data.purchased,
                v,
                &[schedule.monitor_k],
                schedule.negatives,
                schedule.seed,
                schedule.batch_size,
                |b| teacher_scores(t, subgraphs, b),
            )
            .map(|m| m.ndcg[0])
        },
        &mut on_epoch,
    )
}

/// Where the distillation targets come from.
pub enum SoftSource<'a> {
    /// Soft labels cached per sequence id, `[N, V+1]` row-major.
    Cached(&'a [f64]),
    /// A frozen teacher run on each batch.
    Live { teacher: &'a Teacher, subgraphs: &'a [Subgraph] },
}

/// Teacher soft labels of every sequence, indexed by sequence id.
pub fn cache_soft_labels(teacher: &Teacher, subgraphs: &[Subgraph], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(subgraphs.len() * (teacher.num_takeaways() + 1));
    for chunk in subgraphs.chunks(batch_size.max(1)) {
        out.extend(teacher.infer(chunk)?.probs);
    }
    Ok(out)
}

/// Teacher readouts of every sequence, `[N, d]` row-major, for the fusion
/// variants.
pub fn cache_readouts(teacher: &Teacher, subgraphs: &[Subgraph], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in subgraphs.chunks(batch_size.max(1)) {
        out.extend(teacher.infer(chunk)?.readout);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSettings {
    pub tau: f64,
    pub alpha: f64,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self { tau: 3.0, alpha: 0.2 }
    }
}

fn rows_of(data: &[f64], width: usize, ids: impl Iterator<Item = usize>) -> Vec<f64> {
    ids.flat_map(|i| data[i * width..(i + 1) * width].iter().copied()).collect()
}

/// Trains the student on the joint objective. Without `soft` the objective
/// is the supervised loss alone. `readouts` (`[N, d]` by sequence id) feeds
/// a fusion student during training; evaluation always uses `score_valid`.
pub fn distill_student(
    student: &mut Student,
    data: &SequenceSet,
    soft: Option<SoftSource<'_>>,
    readouts: Option<&[f64]>,
    settings: &DistillSettings,
    schedule: &Schedule,
    mut score_valid: impl FnMut(&Student, &[&Sequence]) -> Result<Vec<f64>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    crate::student::joint_loss(0.0, 0.0, settings.alpha)?;
    if !(settings.tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let width = student.num_items() + 1;
    let dim = student.config.dim;
    if let Some(SoftSource::Cached(p)) = &soft {
        if p.len() != data.sequences.len() * width {
            return Err(Error::invalid("soft-label cache does not match the sequences"));
        }
    }
    let train = split_cases(data, Split::Train);
    let valid = split_cases(data, Split::Valid);
    run_epochs(
        student,
        train.len(),
        schedule,
        |s, batch, step_seed| {
            let seqs: Vec<&Sequence> = batch.iter().map(|&i| train[i]).collect();
            let ids = || seqs.iter().map(|s| s.id as usize);
            let targets = match &soft {
                None => None,
                Some(SoftSource::Cached(p)) => Some(soften_probs(&rows_of(p, width, ids()), width, settings.tau)?),
                Some(SoftSource::Live { teacher, subgraphs }) => {
                    Some(soften_logits(&teacher_scores(teacher, subgraphs, &seqs)?, width, settings.tau)?)
                }
            };
            let r = readouts.map(|r| rows_of(r, dim, ids()));
            let mut tape = Tape::new();
            let l = s.losses(
                &mut tape,
                &seqs,
                Mode::Train { seed: step_seed },
                targets.as_deref(),
                settings.tau,
                settings.alpha,
                r.as_deref(),
            )?;
            Ok((tape.scalar(l.joint), tape.backward(l.joint)?))
        },
        |s| {
            evaluate_cases(
                &valid,
                &data.purchased,
                width - 1,
                &[schedule.monitor_k],
                schedule.negatives,
                schedule.seed,
                schedule.batch_size,
                |b| score_valid(s, b),
            )
            .map(|m| m.ndcg[0])
        },
        &mut on_epoch,
    )
}

trait Trainable {
    fn store(&mut self) -> &mut ParamStore;
}

impl Trainable for Teacher {
    fn store(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Trainable for Student {
    fn store(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Shared epoch loop. `step` returns the batch loss and gradients; `monitor`
/// scores parameters on validation data.
fn run_epochs<T, S, M>(
    model: &mut T,
    num_train: usize,
    schedule: &Schedule,
    mut step: S,
    mut monitor: M,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome>
where
    T: Trainable,
    S: FnMut(&T, &[usize], u64) -> Result<(f64, Gradients)>,
    M: FnMut(&T) -> Result<f64>,
{
    let mut state = AdamState::new(model.store(), schedule.adam);
    let mut stopper = EarlyStopping::new(schedule.patience);
    let initial = monitor(model)?;
    stopper.observe(0, initial);
    let mut best = model.store().clone();
    let mut outcome = TrainOutcome {
        epochs: 0,
        best_epoch: 0,
        best_valid_ndcg: initial,
        history: Vec::new(),
        step_losses: Vec::new(),
    };
    for epoch in 1..=schedule.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(num_train, schedule.batch_size, schedule.seed, epoch);
        for (b, batch) in batches.iter().enumerate() {
            let step_seed = rng::derive_seed(schedule.seed, &[epoch as u64, b as u64]);
            let (loss, grads) = match step(model, batch, step_seed) {
                Ok((loss, grads)) if loss.is_finite() => (loss, grads),
                other => {
                    *model.store() = best;
                    return Err(other.err().unwrap_or(Error::NonFinite { op: "training loss", node: 0 }));
                }
            };
            outcome.step_losses.push(loss);
            total += loss;
            adam_step(model.store(), &grads, &mut state)?;
        }
        let valid = monitor(model)?;
        let record = EpochRecord { epoch, mean_loss: total / batches.len().max(1) as f64, valid_ndcg: valid };
        on_epoch(&record);
        outcome.history.push(record);
        outcome.epochs = epoch;
        match stopper.observe(epoch, valid) {
            Progress::Improved => {
                best = model.store().clone();
                outcome.best_epoch = epoch;
                outcome.best_valid_ndcg = valid;
            }
            Progress::Waiting => {}
            Progress::Stop => break,
        }
    }
    *model.store() = best;
    Ok(outcome)
}
