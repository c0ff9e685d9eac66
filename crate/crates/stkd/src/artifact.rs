//! Versioned binary artifacts.
//!
//! Layout: an [`ArtifactHeader`] followed by the payload, both bincode.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"STKD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArtifactKind {
    Dataset,
    Graph,
    Teacher,
    SoftLabels,
    Student,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub kind: ArtifactKind,
    pub config_hash: String,
    pub vocab_hash: u64,
}

impl ArtifactHeader {
    pub fn new(kind: ArtifactKind, config_hash: &str, vocab_hash: u64) -> Self {
        Self { magic: MAGIC, version: FORMAT_VERSION, kind, config_hash: config_hash.to_owned(), vocab_hash }
    }
}

pub fn write_to<T: Serialize>(w: impl Write, header: &ArtifactHeader, payload: &T) -> Result<()> {
    let mut w = w;
    bincode::serialize_into(&mut w, header)?;
    bincode::serialize_into(&mut w, payload)?;
    Ok(())
}

pub fn read_from<T: DeserializeOwned>(r: impl Read, kind: ArtifactKind) -> Result<(ArtifactHeader, T)> {
    let mut r = r;
    let header: ArtifactHeader = bincode::deserialize_from(&mut r).context("reading artifact header")?;
    ensure!(header.magic == MAGIC, "not an stkd artifact");
    if header.version != FORMAT_VERSION {
        bail!("artifact format version {} is not supported (expected {FORMAT_VERSION})", header.version);
    }
    ensure!(header.kind == kind, "expected a {kind:?} artifact, found {:?}", header.kind);
    let payload = bincode::deserialize_from(&mut r).context("reading artifact payload")?;
    Ok((header, payload))
}

pub fn save<T: Serialize>(path: &Path, header: &ArtifactHeader, payload: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, header, payload)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: ArtifactKind) -> Result<(ArtifactHeader, T)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_from(BufReader::new(file), kind).with_context(|| format!("loading {}", path.display()))
}
