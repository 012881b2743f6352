use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ComponentTimings;
use crate::store::{JsonlWriter, StoreError};

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("no latency samples")]
    EmptySamples,
    #[error("latency log: {0}")]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentShare {
    pub mean_ms: f64,
    /// Fraction of the mean end-to-end time.
    pub share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub count: usize,
    pub mean_total_ms: f64,
    pub components: BTreeMap<String, ComponentShare>,
    pub percentiles: Percentiles,
}

/// Nearest-rank percentile of an ascending slice; `pct` in 1..=100.
pub(crate) fn nearest_rank(sorted: &[f64], pct: usize) -> f64 {
    let n = sorted.len();
    let rank = (pct * n).div_ceil(100).clamp(1, n);
    sorted[rank - 1]
}

/// Per-stage means and shares plus end-to-end nearest-rank percentiles.
pub fn latency_report(samples: &[ComponentTimings]) -> Result<LatencyReport, LatencyError> {
    if samples.is_empty() {
        return Err(LatencyError::EmptySamples);
    }
    let n = samples.len() as f64;
    let mut sums = [0.0; 5];
    for s in samples {
        for (acc, v) in sums.iter_mut().zip(s.values()) {
            *acc += v;
        }
    }
    let mean_total: f64 = sums.iter().sum::<f64>() / n;
    let components = ComponentTimings::STAGES
        .iter()
        .zip(sums)
        .map(|(name, sum)| {
            let mean_ms = sum / n;
            let share = if mean_total > 0.0 { mean_ms / mean_total } else { 0.0 };
            (name.to_string(), ComponentShare { mean_ms, share })
        })
        .collect();
    let mut totals: Vec<f64> = samples.iter().map(ComponentTimings::total).collect();
    totals.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        count: samples.len(),
        mean_total_ms: mean_total,
        components,
        percentiles: Percentiles {
            p50: nearest_rank(&totals, 50),
            p90: nearest_rank(&totals, 90),
            p95: nearest_rank(&totals, 95),
            p99: nearest_rank(&totals, 99),
        },
    })
}

/// Append-only JSON-lines log of per-pass timings, one sample per line.
#[derive(Debug)]
pub struct LatencyLog {
    writer: JsonlWriter<ComponentTimings>,
    samples: Mutex<Vec<ComponentTimings>>,
}

impl LatencyLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, LatencyError> {
        let (writer, samples) = JsonlWriter::open(path, false)?;
        Ok(LatencyLog { writer, samples: Mutex::new(samples) })
    }

    pub fn path(&self) -> &Path {
        self.writer.path()
    }

    pub fn append(&self, sample: &ComponentTimings) -> Result<(), LatencyError> {
        let mut samples = self.samples.lock().unwrap_or_else(|p| p.into_inner());
        self.writer.append(sample)?;
        samples.push(*sample);
        Ok(())
    }

    pub fn samples(&self) -> Result<Vec<ComponentTimings>, LatencyError> {
        Ok(self.samples.lock().unwrap_or_else(|p| p.into_inner()).clone())
    }

    pub fn report(&self) -> Result<LatencyReport, LatencyError> {
        latency_report(&self.samples.lock().unwrap_or_else(|p| p.into_inner()))
    }
}
