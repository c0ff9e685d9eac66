//! The two-stage pipeline and the comparative experiments built on it.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use stkd_core::data::{generate_synthetic, Sequence, Split};
use stkd_core::stkg::{build_stkg, Stkg, Subgraph};
use stkd_core::student::{Fusion, Student};
use stkd_core::teacher::Teacher;
use stkd_core::train::{
    cache_readouts, cache_soft_labels, distill_student, evaluate_cases, pretrain_teacher, sample_subgraphs, SoftSource,
    TrainOutcome, Variant,
};

use crate::config::TrainConfig;
use crate::io::Dataset;
use crate::report::{Counts, MetricsReport, TeacherCalls};

/// Dataset plus graph, everything both stages read.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub graph: Stkg,
}

impl Prepared {
    pub fn new(dataset: Dataset) -> Result<Self> {
        let graph = build_stkg(&dataset.events, &dataset.vocab)?;
        Ok(Self { dataset, graph })
    }

    /// Generates the configured synthetic events and prepares them.
    pub fn synthetic(cfg: &TrainConfig) -> Result<Self> {
        let data = generate_synthetic(&cfg.synthetic)?;
        Self::new(Dataset::from_events(&data.events, &cfg.sequence_config())?)
    }

    pub fn vocab_hash(&self) -> u64 {
        self.dataset.vocab_hash()
    }

    fn num_train(&self) -> usize {
        self.dataset.sequences.count(Split::Train)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherCheckpoint {
    pub teacher: Teacher,
    pub outcome: TrainOutcome,
    /// Wall-clock of the run that produced it; not persisted, so saved
    /// checkpoints are byte-identical across repeated runs.
    #[serde(skip)]
    pub train_seconds: Option<f64>,
}

/// A pre-trained teacher with its subgraphs and soft labels, both indexed
/// by sequence id.
pub struct TeacherRun {
    pub checkpoint: TeacherCheckpoint,
    pub subgraphs: Vec<Subgraph>,
    pub soft_labels: Vec<f64>,
}

impl TeacherRun {
    pub fn teacher(&self) -> &Teacher {
        &self.checkpoint.teacher
    }
}

pub fn pretrain(cfg: &TrainConfig, prep: &Prepared) -> Result<TeacherRun> {
    let mut teacher = Teacher::new(cfg.teacher_config(), &prep.graph, cfg.seed)?;
    let subgraphs = sample_subgraphs(&teacher, &prep.dataset.sequences, &prep.graph, cfg.seed)?;
    let start = Instant::now();
    let outcome = pretrain_teacher(&mut teacher, &prep.dataset.sequences, &subgraphs, &cfg.teacher_schedule(), |r| {
        info!("teacher epoch {:>3}  loss {:.4}  valid ndcg@10 {:.4}", r.epoch, r.mean_loss, r.valid_ndcg);
    })?;
    let train_seconds = start.elapsed().as_secs_f64();
    let soft_labels = cache_soft_labels(&teacher, &subgraphs, cfg.eval.batch_size)?;
    teacher.probe().reset();
    Ok(TeacherRun {
        checkpoint: TeacherCheckpoint { teacher, outcome, train_seconds: Some(train_seconds) },
        subgraphs,
        soft_labels,
    })
}

/// How test cases are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// The distilled student alone.
    Stkd,
    Add,
    Cat,
    Multi,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Stkd, Strategy::Add, Strategy::Cat, Strategy::Multi];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Stkd => "stkd",
            Strategy::Add => "add",
            Strategy::Cat => "cat",
            Strategy::Multi => "multi",
        }
    }

    pub fn fusion(self) -> Option<Fusion> {
        match self {
            Strategy::Stkd => None,
            Strategy::Add => Some(Fusion::Add),
            Strategy::Cat => Some(Fusion::Cat),
            Strategy::Multi => Some(Fusion::Multi),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .with_context(|| format!("unknown strategy `{s}` (expected stkd, add, cat or multi)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentCheckpoint {
    pub label: String,
    pub student: Student,
    pub outcome: TrainOutcome,
    /// Wall-clock of the run that produced it; not persisted, so saved
    /// checkpoints are byte-identical across repeated runs.
    #[serde(skip)]
    pub train_seconds: Option<f64>,
}

fn new_student(cfg: &TrainConfig, prep: &Prepared, fusion: Option<Fusion>) -> Result<Student> {
    let v = &prep.dataset.vocab;
    let mut sc = cfg.student_config();
    sc.fusion = fusion;
    Ok(Student::new(sc, v.num_takeaways(), v.num_regions(), v.num_distance_buckets(), cfg.seed)?)
}

fn plain_scores(s: &Student, batch: &[&Sequence]) -> stkd_core::Result<Vec<f64>> {
    s.scores(batch, None)
}

/// Trains one ablation variant. Distilling variants need `teacher`.
pub fn distill(
    cfg: &TrainConfig,
    prep: &Prepared,
    teacher: Option<&TeacherRun>,
    variant: Variant,
) -> Result<StudentCheckpoint> {
    let mut student = new_student(cfg, prep, None)?;
    variant.apply(&mut student);
    let soft = if variant.distills() {
        let t = teacher.with_context(|| format!("variant {variant} needs a pre-trained teacher"))?;
        Some(SoftSource::Cached(&t.soft_labels))
    } else {
        None
    };
    train_student(cfg, prep, student, soft, None, variant.name(), plain_scores)
}

fn train_student(
    cfg: &TrainConfig,
    prep: &Prepared,
    mut student: Student,
    soft: Option<SoftSource<'_>>,
    readouts: Option<&[f64]>,
    label: &str,
    score_valid: impl FnMut(&Student, &[&Sequence]) -> stkd_core::Result<Vec<f64>>,
) -> Result<StudentCheckpoint> {
    let start = Instant::now();
    let outcome = distill_student(
        &mut student,
        &prep.dataset.sequences,
        soft,
        readouts,
        &cfg.distill_settings(),
        &cfg.student_schedule(),
        score_valid,
        |r| info!("{label} epoch {:>3}  loss {:.4}  valid ndcg@10 {:.4}", r.epoch, r.mean_loss, r.valid_ndcg),
    )?;
    Ok(StudentCheckpoint {
        label: label.to_owned(),
        student,
        outcome,
        train_seconds: Some(start.elapsed().as_secs_f64()),
    })
}

/// Trains a student that fuses the teacher readout at its prediction anchor.
pub fn train_fusion(
    cfg: &TrainConfig,
    prep: &Prepared,
    teacher: &TeacherRun,
    strategy: Strategy,
) -> Result<StudentCheckpoint> {
    let fusion = strategy.fusion().context("the stkd strategy is trained with `distill`")?;
    let student = new_student(cfg, prep, Some(fusion))?;
    let readouts = cache_readouts(teacher.teacher(), &teacher.subgraphs, cfg.eval.batch_size)?;
    let t = teacher.teacher();
    let subgraphs = &teacher.subgraphs;
    let score = |s: &Student, b: &[&Sequence]| {
        let sg: Vec<Subgraph> = b.iter().map(|q| subgraphs[q.id as usize].clone()).collect();
        s.scores(b, Some(&t.infer(&sg)?.readout))
    };
    let ck = train_student(cfg, prep, student, None, Some(&readouts), strategy.name(), score)?;
    t.probe().reset();
    Ok(ck)
}

/// Where the teacher comes in at prediction time.
pub enum Scoring<'a> {
    /// Student forward passes only. The teacher, when given, is only read
    /// for its instrumentation counters.
    StudentOnly { teacher: Option<&'a Teacher> },
    /// Sample a subgraph and run the teacher for every batch.
    Fusion { teacher: &'a Teacher, graph: &'a Stkg },
}

pub fn evaluate(
    cfg: &TrainConfig,
    prep: &Prepared,
    ck: &StudentCheckpoint,
    split: Split,
    ks: &[usize],
    scoring: Scoring<'_>,
) -> Result<MetricsReport> {
    ensure!(split != Split::Train, "evaluation runs on the valid or test split");
    let cases: Vec<&Sequence> = prep.dataset.sequences.split(split).collect();
    let probe_of = match &scoring {
        Scoring::StudentOnly { teacher } => *teacher,
        Scoring::Fusion { teacher, .. } => Some(*teacher),
    };
    if let Some(t) = probe_of {
        t.probe().reset();
    }
    match (&scoring, ck.student.config.fusion) {
        (Scoring::StudentOnly { .. }, Some(_)) => bail!("a fusion student needs the teacher at prediction time"),
        (Scoring::Fusion { .. }, None) => bail!("a plain student does not fuse teacher output"),
        _ => {}
    }
    let mut predict_seconds = 0.0;
    let mut predict_batches = 0;
    let student = &ck.student;
    let metrics = evaluate_cases(
        &cases,
        &prep.dataset.sequences.purchased,
        prep.dataset.vocab.num_takeaways(),
        ks,
        cfg.eval.negatives,
        cfg.seed,
        cfg.eval.batch_size,
        |batch| {
            let start = Instant::now();
            let scores = match &scoring {
                Scoring::StudentOnly { .. } => student.scores(batch, None),
                Scoring::Fusion { teacher, graph } => {
                    let sg = batch
                        .iter()
                        .map(|s| teacher.sample(s, graph, cfg.seed))
                        .collect::<stkd_core::Result<Vec<_>>>()?;
                    let readout = teacher.infer(&sg)?.readout;
                    student.scores(batch, Some(&readout))
                }
            };
            predict_seconds += start.elapsed().as_secs_f64();
            predict_batches += 1;
            scores
        },
    )?;
    let teacher_calls = probe_of
        .map(|t| TeacherCalls { subgraphs: t.probe().subgraphs(), gnn_samples: t.probe().gnn_samples() })
        .unwrap_or_default();
    let (hr, ndcg) = MetricsReport::metrics_from(&metrics);
    let report = MetricsReport {
        label: ck.label.clone(),
        split: format!("{split:?}").to_lowercase(),
        seed: cfg.seed,
        hr,
        ndcg,
        counts: Counts {
            cases: metrics.count,
            short_pools: metrics.short_pools,
            train_sequences: prep.num_train(),
            epochs: ck.outcome.epochs,
            best_epoch: ck.outcome.best_epoch,
        },
        train_seconds: ck.train_seconds,
        predict_seconds,
        predict_batches,
        teacher_calls,
        config_hash: cfg.hash(),
        vocab_hash: format!("{:016x}", prep.vocab_hash()),
        config: cfg.clone(),
    };
    report.check()?;
    Ok(report)
}

/// One test-split report per variant, sharing data, seed and teacher.
pub fn ablate(cfg: &TrainConfig, prep: &Prepared, variants: &[Variant]) -> Result<Vec<MetricsReport>> {
    let teacher = if variants.iter().any(|v| v.distills()) { Some(pretrain(cfg, prep)?) } else { None };
    let mut reports = Vec::new();
    for &v in variants {
        let ck = distill(cfg, prep, teacher.as_ref(), v)?;
        let scoring = Scoring::StudentOnly { teacher: teacher.as_ref().map(TeacherRun::teacher) };
        let report = evaluate(cfg, prep, &ck, Split::Test, &cfg.eval.ks, scoring)?;
        info!("{}", report.summary());
        reports.push(report);
    }
    Ok(reports)
}

/// Distillation against inference-time fusion, with prediction timing.
pub fn ablate_fusion(cfg: &TrainConfig, prep: &Prepared, strategies: &[Strategy]) -> Result<Vec<MetricsReport>> {
    let teacher = pretrain(cfg, prep)?;
    let mut reports = Vec::new();
    for &s in strategies {
        let report = match s {
            Strategy::Stkd => {
                let ck = distill(cfg, prep, Some(&teacher), Variant::Full)?;
                let ck = StudentCheckpoint { label: s.name().into(), ..ck };
                let scoring = Scoring::StudentOnly { teacher: Some(teacher.teacher()) };
                evaluate(cfg, prep, &ck, Split::Test, &cfg.eval.ks, scoring)?
            }
            _ => {
                let ck = train_fusion(cfg, prep, &teacher, s)?;
                let scoring = Scoring::Fusion { teacher: teacher.teacher(), graph: &prep.graph };
                evaluate(cfg, prep, &ck, Split::Test, &cfg.eval.ks, scoring)?
            }
        };
        info!("{}", report.summary());
        reports.push(report);
    }
    Ok(reports)
}

/// Full-variant reports over the temperature and fanout grids.
pub fn sweep(cfg: &TrainConfig, prep: &Prepared) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for fanouts in &cfg.sweep.fanouts {
        let mut c = cfg.clone();
        c.teacher.fanouts = fanouts.clone();
        c.validate()?;
        let teacher = pretrain(&c, prep)?;
        for &tau in &cfg.sweep.taus {
            let mut c = c.clone();
            c.student.tau = tau;
            let ck = distill(&c, prep, Some(&teacher), Variant::Full)?;
            let label = format!("tau={tau} s={fanouts:?}");
            let ck = StudentCheckpoint { label, ..ck };
            let scoring = Scoring::StudentOnly { teacher: Some(teacher.teacher()) };
            let report = evaluate(&c, prep, &ck, Split::Test, &c.eval.ks, scoring)?;
            info!("{}", report.summary());
            reports.push(report);
        }
    }
    Ok(reports)
}
