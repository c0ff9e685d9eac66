use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use stkd_core::metrics::RankingMetrics;

use crate::config::TrainConfig;

/// Teacher instrumentation read after an evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherCalls {
    pub subgraphs: u64,
    pub gnn_samples: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub cases: usize,
    pub short_pools: usize,
    pub train_sequences: usize,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Variant, fusion strategy or sweep point.
    pub label: String,
    pub split: String,
    pub seed: u64,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub counts: Counts,
    /// Unknown when the checkpoint was loaded from disk.
    pub train_seconds: Option<f64>,
    pub predict_seconds: f64,
    pub predict_batches: usize,
    pub teacher_calls: TeacherCalls,
    pub config_hash: String,
    pub vocab_hash: String,
    pub config: TrainConfig,
}

impl MetricsReport {
    pub fn metrics_from(m: &RankingMetrics) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
        let hr = m.ks.iter().copied().zip(m.hr.iter().copied()).collect();
        let ndcg = m.ks.iter().copied().zip(m.ndcg.iter().copied()).collect();
        (hr, ndcg)
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.get(&k).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }

    pub fn predict_seconds_per_batch(&self) -> f64 {
        self.predict_seconds / self.predict_batches.max(1) as f64
    }

    /// Values in `[0, 1]` and non-decreasing in `k`.
    pub fn check(&self) -> Result<()> {
        for m in [&self.hr, &self.ndcg] {
            ensure!(m.values().all(|v| (0.0..=1.0).contains(v)), "metric outside [0, 1]");
            let v: Vec<f64> = m.values().copied().collect();
            ensure!(v.windows(2).all(|w| w[0] <= w[1]), "metric decreases with k");
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let fmt = |m: &BTreeMap<usize, f64>, name: &str| {
            m.iter().map(|(k, v)| format!("{name}@{k}={v:.4}")).collect::<Vec<_>>().join(" ")
        };
        format!(
            "{:<10} {} {}  train {}  predict {:.3}s",
            self.label,
            fmt(&self.hr, "HR"),
            fmt(&self.ndcg, "NDCG"),
            self.train_seconds.map_or("-".to_owned(), |s| format!("{s:.1}s")),
            self.predict_seconds
        )
    }
}

pub fn write_reports(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let text = serde_json::to_string_pretty(reports)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
