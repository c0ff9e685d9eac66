use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use stkd::artifact::{self, ArtifactHeader, ArtifactKind};
use stkd::pipeline::{self, Scoring, StudentCheckpoint, TeacherCheckpoint, TeacherRun};
use stkd::report::write_reports;
use stkd::{Dataset, Prepared, Strategy, TrainConfig};
use stkd_core::data::{generate_synthetic, Split};
use stkd_core::stkg::{graph_stats, Stkg};
use stkd_core::train::{sample_subgraphs, Variant};

#[derive(Parser)]
#[command(name = "stkd", version, about = "Spatial-temporal knowledge-distilled takeaway recommendation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write planted-pattern synthetic events as JSON lines.
    GenSynth,
    /// Ingest events and build leave-one-out sequences.
    Prepare,
    /// Build the knowledge graph from the prepared dataset.
    BuildGraph,
    /// Pre-train the teacher and cache its soft labels.
    Pretrain,
    /// Train a student variant, or a fusion student with `--strategy`.
    Distill {
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Score a trained student on held-out purchases.
    Evaluate {
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Train and evaluate several variants on shared data.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        variant: Option<Vec<String>>,
    },
    /// Compare distillation with inference-time fusion, including timing.
    AblateFusion {
        #[arg(long, value_delimiter = ',')]
        strategy: Option<Vec<String>>,
    },
    /// Grid over temperatures and fanouts.
    Sweep,
}

struct Ctx {
    cfg: TrainConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn header(&self, kind: ArtifactKind, vocab_hash: u64) -> ArtifactHeader {
        ArtifactHeader::new(kind, &self.cfg.hash(), vocab_hash)
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let (_, ds): (_, Dataset) =
            artifact::load(&self.path("dataset.bin"), ArtifactKind::Dataset).context("run `stkd prepare` first")?;
        Ok(ds)
    }

    fn load_prepared(&self) -> Result<Prepared> {
        let dataset = self.load_dataset()?;
        let (h, graph): (_, Stkg) =
            artifact::load(&self.path("graph.bin"), ArtifactKind::Graph).context("run `stkd build-graph` first")?;
        check_vocab(&h, dataset.vocab_hash(), "graph")?;
        Ok(Prepared { dataset, graph })
    }

    fn load_teacher(&self, prep: &Prepared) -> Result<TeacherRun> {
        let (h, checkpoint): (_, TeacherCheckpoint) =
            artifact::load(&self.path("teacher.bin"), ArtifactKind::Teacher).context("run `stkd pretrain` first")?;
        check_vocab(&h, prep.vocab_hash(), "teacher")?;
        let (h, soft_labels): (_, Vec<f64>) = artifact::load(&self.path("soft_labels.bin"), ArtifactKind::SoftLabels)?;
        check_vocab(&h, prep.vocab_hash(), "soft labels")?;
        let subgraphs = sample_subgraphs(&checkpoint.teacher, &prep.dataset.sequences, &prep.graph, self.cfg.seed)?;
        checkpoint.teacher.probe().reset();
        Ok(TeacherRun { checkpoint, subgraphs, soft_labels })
    }
}

fn check_vocab(h: &ArtifactHeader, expected: u64, what: &str) -> Result<()> {
    ensure!(
        h.vocab_hash == expected,
        "{what} was built for a different vocabulary ({:016x}, dataset has {expected:016x})",
        h.vocab_hash
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => bail!("unknown split `{s}` (expected valid or test)"),
    }
}

fn label(variant: &str, strategy: &Option<String>) -> Result<String> {
    Ok(match strategy {
        Some(s) => s.parse::<Strategy>()?.name().to_owned(),
        None => variant.parse::<Variant>()?.name().to_owned(),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
        cfg.synthetic.seed = seed;
    }
    fs::create_dir_all(&cli.common.out_dir)?;
    let ctx = Ctx { cfg, out: cli.common.out_dir };
    run(&ctx, cli.command)
}

fn run(ctx: &Ctx, command: Command) -> Result<()> {
    let cfg = &ctx.cfg;
    match command {
        Command::GenSynth => {
            let data = generate_synthetic(&cfg.synthetic)?;
            let path = ctx.path("events.jsonl");
            stkd::io::write_events(&path, &data.events)?;
            write_json(&ctx.path("planted_pairs.json"), &data.pairs)?;
            info!("wrote {} events to {}", data.events.len(), path.display());
        }
        Command::Prepare => {
            let ds = Dataset::load_jsonl(&cfg.data.events, &cfg.sequence_config())?;
            info!(
                "{} events kept of {} ({} malformed, {} bad geohash); {} sequences",
                ds.report.retained,
                ds.report.total,
                ds.report.malformed,
                ds.report.dropped_geohash,
                ds.sequences.sequences.len()
            );
            artifact::save(&ctx.path("dataset.bin"), &ctx.header(ArtifactKind::Dataset, ds.vocab_hash()), &ds)?;
        }
        Command::BuildGraph => {
            let ds = ctx.load_dataset()?;
            let prep = Prepared::new(ds)?;
            let stats = graph_stats(&prep.graph);
            info!("{} entities, {} triples", stats.entities, stats.triples);
            write_json(&ctx.path("graph_stats.json"), &stats)?;
            artifact::save(&ctx.path("graph.bin"), &ctx.header(ArtifactKind::Graph, prep.vocab_hash()), &prep.graph)?;
        }
        Command::Pretrain => {
            let prep = ctx.load_prepared()?;
            let run = pipeline::pretrain(cfg, &prep)?;
            let vh = prep.vocab_hash();
            artifact::save(&ctx.path("teacher.bin"), &ctx.header(ArtifactKind::Teacher, vh), &run.checkpoint)?;
            artifact::save(&ctx.path("soft_labels.bin"), &ctx.header(ArtifactKind::SoftLabels, vh), &run.soft_labels)?;
            info!("teacher kept epoch {} of {}", run.checkpoint.outcome.best_epoch, run.checkpoint.outcome.epochs);
        }
        Command::Distill { variant, strategy } => {
            let prep = ctx.load_prepared()?;
            let name = label(&variant, &strategy)?;
            let ck = match strategy {
                Some(s) => {
                    let teacher = ctx.load_teacher(&prep)?;
                    match s.parse::<Strategy>()? {
                        Strategy::Stkd => {
                            let ck = pipeline::distill(cfg, &prep, Some(&teacher), Variant::Full)?;
                            StudentCheckpoint { label: name.clone(), ..ck }
                        }
                        other => pipeline::train_fusion(cfg, &prep, &teacher, other)?,
                    }
                }
                None => {
                    let v: Variant = variant.parse()?;
                    let teacher = if v.distills() { Some(ctx.load_teacher(&prep)?) } else { None };
                    pipeline::distill(cfg, &prep, teacher.as_ref(), v)?
                }
            };
            let path = ctx.path(&format!("student-{name}.bin"));
            artifact::save(&path, &ctx.header(ArtifactKind::Student, prep.vocab_hash()), &ck)?;
            info!(
                "{name}: kept epoch {} of {}, {:.1}s",
                ck.outcome.best_epoch,
                ck.outcome.epochs,
                ck.train_seconds.unwrap_or_default()
            );
        }
        Command::Evaluate { variant, strategy, split, k } => {
            let prep = ctx.load_prepared()?;
            let name = label(&variant, &strategy)?;
            let (h, ck): (_, StudentCheckpoint) =
                artifact::load(&ctx.path(&format!("student-{name}.bin")), ArtifactKind::Student)?;
            check_vocab(&h, prep.vocab_hash(), "student")?;
            let split = parse_split(&split)?;
            let ks = k.unwrap_or_else(|| cfg.eval.ks.clone());
            let teacher = if ck.student.config.fusion.is_some() || ctx.path("teacher.bin").exists() {
                Some(ctx.load_teacher(&prep)?)
            } else {
                None
            };
            let scoring = match (&teacher, ck.student.config.fusion) {
                (Some(t), Some(_)) => Scoring::Fusion { teacher: t.teacher(), graph: &prep.graph },
                (t, _) => Scoring::StudentOnly { teacher: t.as_ref().map(TeacherRun::teacher) },
            };
            let report = pipeline::evaluate(cfg, &prep, &ck, split, &ks, scoring)?;
            println!("{}", report.summary());
            write_reports(&ctx.path(&format!("metrics-{name}-{}.json", report.split)), &[report])?;
        }
        Command::Ablate { variant } => {
            let variants = match variant {
                Some(v) => v.iter().map(|s| s.parse()).collect::<Result<Vec<Variant>, _>>()?,
                None => Variant::ALL.to_vec(),
            };
            let prep = ctx.load_prepared()?;
            let reports = pipeline::ablate(cfg, &prep, &variants)?;
            for r in &reports {
                println!("{}", r.summary());
            }
            write_reports(&ctx.path("ablation.json"), &reports)?;
        }
        Command::AblateFusion { strategy } => {
            let strategies = match strategy {
                Some(v) => v.iter().map(|s| s.parse()).collect::<Result<Vec<Strategy>>>()?,
                None => Strategy::ALL.to_vec(),
            };
            let prep = ctx.load_prepared()?;
            let reports = pipeline::ablate_fusion(cfg, &prep, &strategies)?;
            for r in &reports {
                println!(
                    "{}  per batch {:.5}s  teacher calls {}",
                    r.summary(),
                    r.predict_seconds_per_batch(),
                    r.teacher_calls.gnn_samples
                );
            }
            write_reports(&ctx.path("fusion.json"), &reports)?;
        }
        Command::Sweep => {
            let prep = ctx.load_prepared()?;
            let reports = pipeline::sweep(cfg, &prep)?;
            for r in &reports {
                println!("{}", r.summary());
            }
            write_reports(&ctx.path("sweep.json"), &reports)?;
        }
    }
    Ok(())
}
