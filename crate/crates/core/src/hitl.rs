//! Human-in-the-loop correction capture, online accuracy monitoring and the
//! retraining trigger.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{match_format, FormatMatch, PlateFormatRule};
use crate::store::{JsonlWriter, StoreError};
use crate::vqa::{ImageDigest, ImageRef, TaskKind};

#[derive(Debug, Error)]
pub enum HitlError {
    #[error("correction log: {0}")]
    StorageFailure(#[from] StoreError),
    #[error("accuracy window is empty")]
    EmptyWindow,
    #[error("unknown correction `{0}`")]
    UnknownCorrection(String),
    #[error("correction `{0}` is not awaiting secondary review")]
    NotInSecondaryReview(String),
    #[error("invalid trigger config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    QualityBelowThreshold,
    Duplicate,
    /// The corrected value equals the original prediction.
    Unchanged,
    EmptyValue,
    /// Turned down during secondary review.
    ReviewerRejected,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::QualityBelowThreshold => "quality_below_threshold",
            RejectReason::Duplicate => "duplicate",
            RejectReason::Unchanged => "unchanged",
            RejectReason::EmptyValue => "empty_value",
            RejectReason::ReviewerRejected => "reviewer_rejected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionStatus {
    Accepted,
    SecondaryReview,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub id: String,
    pub image: ImageRef,
    pub task: TaskKind,
    pub original_value: String,
    pub corrected_value: String,
    pub operator_id: String,
    pub created_at: DateTime<Utc>,
    pub status: CorrectionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_id: Option<String>,
}

impl CorrectionRecord {
    pub fn dedup_key(&self) -> DedupKey {
        DedupKey {
            digest: self.image.digest.clone(),
            task: self.task,
            value: self.corrected_value.clone(),
        }
    }
}

/// Corrections are unique per (image, task, corrected value), so a later fix
/// of a bad correction is still accepted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DedupKey {
    pub digest: ImageDigest,
    pub task: TaskKind,
    pub value: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    pub min_quality: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig { min_quality: 0.30 }
    }
}

/// Quality gates applied to a correction before it is stored. Pure: the
/// caller owns the seen-key set.
pub fn ingest_correction(
    record: &CorrectionRecord,
    quality: &QualityConfig,
    rules: &[PlateFormatRule],
    seen: &HashSet<DedupKey>,
) -> CorrectionStatus {
    if record.image.quality_score < quality.min_quality {
        return CorrectionStatus::Rejected(RejectReason::QualityBelowThreshold);
    }
    if record.corrected_value.is_empty() {
        return CorrectionStatus::Rejected(RejectReason::EmptyValue);
    }
    if record.corrected_value == record.original_value {
        return CorrectionStatus::Rejected(RejectReason::Unchanged);
    }
    if seen.contains(&record.dedup_key()) {
        return CorrectionStatus::Rejected(RejectReason::Duplicate);
    }
    if record.task == TaskKind::PlateRecognition
        && match_format(&record.corrected_value, rules) == FormatMatch::Malformed
    {
        return CorrectionStatus::SecondaryReview;
    }
    CorrectionStatus::Accepted
}

/// Durable correction log. Rejected corrections are never written; a
/// secondary-review resolution appends a new line for the same id, and the
/// latest line wins on reload.
#[derive(Debug)]
pub struct CorrectionLog {
    writer: JsonlWriter<CorrectionRecord>,
    records: Vec<CorrectionRecord>,
    index: BTreeMap<String, usize>,
    seen: HashSet<DedupKey>,
}

impl CorrectionLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, HitlError> {
        let (writer, lines) = JsonlWriter::open(path, true)?;
        let mut log = CorrectionLog { writer, records: Vec::new(), index: BTreeMap::new(), seen: HashSet::new() };
        for r in lines {
            log.apply(r);
        }
        Ok(log)
    }

    fn apply(&mut self, record: CorrectionRecord) {
        if matches!(record.status, CorrectionStatus::Rejected(_)) {
            self.seen.remove(&record.dedup_key());
        } else {
            self.seen.insert(record.dedup_key());
        }
        match self.index.get(&record.id) {
            Some(&i) => self.records[i] = record,
            None => {
                self.index.insert(record.id.clone(), self.records.len());
                self.records.push(record);
            }
        }
    }

    /// Runs the quality gates and persists the record unless rejected. The
    /// returned status is what the record was stored with.
    pub fn ingest(
        &mut self,
        mut record: CorrectionRecord,
        quality: &QualityConfig,
        rules: &[PlateFormatRule],
    ) -> Result<CorrectionStatus, HitlError> {
        let status = ingest_correction(&record, quality, rules, &self.seen);
        if matches!(status, CorrectionStatus::Rejected(_)) {
            return Ok(status);
        }
        record.status = status;
        self.writer.append(&record)?;
        self.apply(record);
        Ok(status)
    }

    /// Resolves a secondary-review item.
    pub fn adjudicate(&mut self, id: &str, accept: bool) -> Result<CorrectionRecord, HitlError> {
        let i = *self.index.get(id).ok_or_else(|| HitlError::UnknownCorrection(id.to_string()))?;
        if self.records[i].status != CorrectionStatus::SecondaryReview {
            return Err(HitlError::NotInSecondaryReview(id.to_string()));
        }
        let mut updated = self.records[i].clone();
        updated.status = if accept {
            CorrectionStatus::Accepted
        } else {
            CorrectionStatus::Rejected(RejectReason::ReviewerRejected)
        };
        self.writer.append(&updated)?;
        self.apply(updated.clone());
        Ok(updated)
    }

    pub fn get(&self, id: &str) -> Option<&CorrectionRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// All stored records in first-write order, at their latest status.
    pub fn records(&self) -> &[CorrectionRecord] {
        &self.records
    }

    pub fn accepted(&self) -> impl Iterator<Item = &CorrectionRecord> {
        self.records.iter().filter(|r| r.status == CorrectionStatus::Accepted)
    }

    pub fn secondary_queue(&self) -> impl Iterator<Item = &CorrectionRecord> {
        self.records.iter().filter(|r| r.status == CorrectionStatus::SecondaryReview)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewEvent {
    Confirmed,
    Corrected,
}

/// Most recent review outcomes, bounded.
#[derive(Debug, Clone)]
pub struct AccuracyWindow {
    window_size: usize,
    events: VecDeque<ReviewEvent>,
    confirmed: usize,
}

impl AccuracyWindow {
    pub fn new(window_size: usize) -> Self {
        assert!(window_size > 0, "window size must be positive");
        AccuracyWindow { window_size, events: VecDeque::with_capacity(window_size), confirmed: 0 }
    }

    pub fn push(&mut self, event: ReviewEvent) {
        if self.events.len() == self.window_size && self.events.pop_front() == Some(ReviewEvent::Confirmed) {
            self.confirmed -= 1;
        }
        if event == ReviewEvent::Confirmed {
            self.confirmed += 1;
        }
        self.events.push_back(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn clear(&mut self) {
        self.events.clear();
        self.confirmed = 0;
    }
}

/// confirmed / (confirmed + corrected) over the window.
pub fn rolling_accuracy(window: &AccuracyWindow) -> Result<f64, HitlError> {
    if window.is_empty() {
        return Err(HitlError::EmptyWindow);
    }
    Ok(window.confirmed as f64 / window.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub window_size: usize,
    /// Review events after a model swap before the baseline is taken.
    pub baseline_warmup: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { window_size: 500, baseline_warmup: 100 }
    }
}

/// Rolling accuracy of the active model plus the baseline it is compared to.
/// The window resets on every swap; the baseline is the rolling accuracy once
/// `baseline_warmup` events have been seen on the new model.
#[derive(Debug, Clone)]
pub struct AccuracyMonitor {
    config: MonitorConfig,
    window: AccuracyWindow,
    since_swap: usize,
    baseline: Option<f64>,
}

impl AccuracyMonitor {
    pub fn new(config: MonitorConfig) -> Self {
        AccuracyMonitor { config, window: AccuracyWindow::new(config.window_size), since_swap: 0, baseline: None }
    }

    pub fn record(&mut self, event: ReviewEvent) {
        self.window.push(event);
        self.since_swap += 1;
        if self.baseline.is_none() && self.since_swap >= self.config.baseline_warmup.max(1) {
            self.baseline = rolling_accuracy(&self.window).ok();
        }
    }

    pub fn on_swap(&mut self) {
        self.window.clear();
        self.since_swap = 0;
        self.baseline = None;
    }

    pub fn current(&self) -> Option<f64> {
        rolling_accuracy(&self.window).ok()
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn window(&self) -> &AccuracyWindow {
        &self.window
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub min_corrections: usize,
    pub max_corrections: usize,
    pub time_threshold_hours: f64,
    pub accuracy_drop_threshold: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            min_corrections: 50,
            max_corrections: 500,
            time_threshold_hours: 4.0,
            accuracy_drop_threshold: 0.05,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<(), HitlError> {
        if self.min_corrections == 0 || self.min_corrections > self.max_corrections {
            return Err(HitlError::InvalidConfig(format!(
                "need 0 < min_corrections <= max_corrections (got {}, {})",
                self.min_corrections, self.max_corrections
            )));
        }
        if !(self.time_threshold_hours > 0.0) || !(self.accuracy_drop_threshold > 0.0) {
            return Err(HitlError::InvalidConfig("thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    pub pending_count: usize,
    pub oldest_pending_at: Option<DateTime<Utc>>,
    pub baseline_accuracy: Option<f64>,
    pub current_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerReason {
    BufferFull,
    TimeElapsed,
    AccuracyDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerDecision {
    NoTrain,
    Train(TriggerReason),
}

/// Absorbs binary rounding in differences such as 0.92 - 0.87.
const DROP_EPSILON: f64 = 1e-9;

/// Precedence is fixed: buffer full, then elapsed time, then accuracy drop.
pub fn should_train(state: &TriggerState, config: &TriggerConfig, now: DateTime<Utc>) -> TriggerDecision {
    if state.pending_count >= config.max_corrections {
        return TriggerDecision::Train(TriggerReason::BufferFull);
    }
    if state.pending_count >= config.min_corrections {
        if let Some(oldest) = state.oldest_pending_at {
            let elapsed_ms = (now - oldest).num_milliseconds() as f64;
            if elapsed_ms >= config.time_threshold_hours * 3_600_000.0 {
                return TriggerDecision::Train(TriggerReason::TimeElapsed);
            }
        }
    }
    if state.pending_count >= 1 {
        if let (Some(base), Some(cur)) = (state.baseline_accuracy, state.current_accuracy) {
            if base - cur - config.accuracy_drop_threshold > DROP_EPSILON {
                return TriggerDecision::Train(TriggerReason::AccuracyDrop);
            }
        }
    }
    TriggerDecision::NoTrain
}
