use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stkd_core::data::{SequenceConfig, SyntheticConfig};
use stkd_core::numerics::AdamConfig;
use stkd_core::student::StudentConfig;
use stkd_core::teacher::TeacherConfig;
use stkd_core::train::{DistillSettings, Schedule};

/// Floating point width of every computation. Only `f64` is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// JSON-lines purchase events, relative to the config file.
    pub events: PathBuf,
    /// Keep only the most recent training prefixes of each user.
    pub max_train_per_user: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { events: PathBuf::from("events.jsonl"), max_train_per_user: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub layers: usize,
    pub fanouts: Vec<usize>,
    pub embedding_std: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.001,
            patience: 5,
            layers: 2,
            fanouts: vec![10, 10],
            embedding_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub tau: f64,
    pub alpha: f64,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.001,
            patience: 5,
            heads: 2,
            layers: 2,
            dropout: 0.1,
            init_std: 0.02,
            tau: 3.0,
            alpha: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub negatives: usize,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ks: vec![5, 10, 20], negatives: 100, batch_size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub taus: Vec<f64>,
    pub fanouts: Vec<Vec<usize>>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            taus: vec![1.0, 3.0, 5.0, 7.0, 9.0],
            fanouts: vec![vec![5, 5], vec![10, 10], vec![15, 15], vec![20, 20]],
        }
    }
}

/// Everything a run depends on. Loaded from TOML; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Sequence length.
    pub n: usize,
    /// Embedding width of both models.
    pub d: usize,
    pub precision: Precision,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub synthetic: SyntheticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n: 128,
            d: 256,
            precision: Precision::F64,
            data: DataSection::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reads a TOML file. A relative `data.events` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.data.events.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.events = dir.join(&cfg.data.events);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n > 0 && self.d > 0, "n and d must be positive");
        let t = &self.teacher;
        let s = &self.student;
        ensure!(t.batch_size > 0 && s.batch_size > 0 && self.eval.batch_size > 0, "batch sizes must be positive");
        ensure!(t.patience > 0 && s.patience > 0, "patience must be positive");
        ensure!(t.lr > 0.0 && s.lr > 0.0, "learning rates must be positive");
        ensure!(s.tau > 0.0, "tau must be positive");
        ensure!((0.0..=1.0).contains(&s.alpha), "alpha must lie in [0, 1]");
        ensure!(self.eval.negatives > 0, "negatives must be positive");
        ensure!(self.sweep.taus.iter().all(|&x| x > 0.0), "sweep temperatures must be positive");
        ensure!(self.data.max_train_per_user != Some(0), "max_train_per_user must be positive");
        self.teacher_config().validate()?;
        self.student_config().validate()?;
        self.synthetic.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn sequence_config(&self) -> SequenceConfig {
        SequenceConfig { max_len: self.n, max_train_per_user: self.data.max_train_per_user }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            dim: self.d,
            seq_len: self.n,
            layers: self.teacher.layers,
            fanouts: self.teacher.fanouts.clone(),
            embedding_std: self.teacher.embedding_std,
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            dim: self.d,
            heads: self.student.heads,
            layers: self.student.layers,
            seq_len: self.n,
            dropout: self.student.dropout,
            init_std: self.student.init_std,
            ..Default::default()
        }
    }

    pub fn teacher_schedule(&self) -> Schedule {
        Schedule {
            epochs: self.teacher.epochs,
            batch_size: self.teacher.batch_size,
            patience: self.teacher.patience,
            seed: self.seed,
            adam: AdamConfig { lr: self.teacher.lr, ..Default::default() },
            monitor_k: 10,
            negatives: self.eval.negatives,
        }
    }

    pub fn student_schedule(&self) -> Schedule {
        Schedule {
            epochs: self.student.epochs,
            batch_size: self.student.batch_size,
            patience: self.student.patience,
            seed: self.seed,
            adam: AdamConfig { lr: self.student.lr, ..Default::default() },
            monitor_k: 10,
            negatives: self.eval.negatives,
        }
    }

    pub fn distill_settings(&self) -> DistillSettings {
        DistillSettings { tau: self.student.tau, alpha: self.student.alpha }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back: TrainConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn every_field_is_addressable() {
        let cfg: TrainConfig = toml::from_str(
            "seed = 9\nn = 16\nd = 32\nprecision = \"f64\"\n[student]\nalpha = 0.5\ntau = 7.0\n[teacher]\nfanouts = [5, 5]\n",
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.n, cfg.d), (9, 16, 32));
        assert_eq!(cfg.student.alpha, 0.5);
        assert_eq!(cfg.teacher.fanouts, vec![5, 5]);
        assert_ne!(cfg.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(toml::from_str::<TrainConfig>("precision = \"f32\"").is_err());
        assert!(toml::from_str::<TrainConfig>("epochz = 3").is_err());
        let mut cfg = TrainConfig::default();
        cfg.student.alpha = 1.2;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { d: 255, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
