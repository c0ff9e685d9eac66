use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stkd_core::data::{
    build_sequences, ingest_events, IngestReport, PurchaseEvent, RawEvent, SequenceConfig, SequenceSet, Vocab,
};

/// Parses JSON lines into raw events. Blank lines are skipped; lines that
/// fail to parse are passed on as errors so ingestion can count them.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Result<RawEvent, serde_json::Error>>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line));
    }
    Ok(out)
}

pub fn write_jsonl<'a>(writer: impl Write, events: impl IntoIterator<Item = &'a RawEvent>) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events(path: &Path, events: &[PurchaseEvent]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let raws: Vec<RawEvent> = events.iter().map(PurchaseEvent::to_raw).collect();
    write_jsonl(file, &raws)
}

/// Cleaned events with their id spaces and leave-one-out sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub events: Vec<PurchaseEvent>,
    pub vocab: Vocab,
    pub report: IngestReport,
    pub sequences: SequenceSet,
}

impl Dataset {
    pub fn from_raw<E>(records: impl IntoIterator<Item = Result<RawEvent, E>>, cfg: &SequenceConfig) -> Result<Self> {
        let ing = ingest_events(records)?;
        let sequences = build_sequences(&ing.events, &ing.vocab, cfg)?;
        Ok(Self { events: ing.events, vocab: ing.vocab, report: ing.report, sequences })
    }

    pub fn from_events(events: &[PurchaseEvent], cfg: &SequenceConfig) -> Result<Self> {
        Self::from_raw(events.iter().map(|e| Ok::<_, ()>(e.to_raw())), cfg)
    }

    pub fn load_jsonl(path: &Path, cfg: &SequenceConfig) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let records = parse_jsonl(BufReader::new(file))?;
        Self::from_raw(records, cfg).with_context(|| format!("ingesting {}", path.display()))
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab.fingerprint()
    }
}
