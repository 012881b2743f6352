//! Evaluation metrics: edit distance, CER, exact-match accuracy, expected
//! calibration error with reliability bins, and the plate error taxonomy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{match_format, FormatMatch, PlateFormatRule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    EmptyInput,
    #[error("pair {index} has an empty ground truth")]
    EmptyTruth { index: usize },
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("confidence {value} at pair {index} outside [0, 1]")]
    ConfidenceOutOfRange { index: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub predicted: String,
    pub truth: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_predicted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_truth: Option<String>,
}

impl EvalPair {
    pub fn new(predicted: impl Into<String>, truth: impl Into<String>, confidence: f64) -> Self {
        EvalPair {
            predicted: predicted.into(),
            truth: truth.into(),
            confidence,
            state_predicted: None,
            state_truth: None,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.predicted == self.truth
    }
}

/// Unit-cost Levenshtein distance over chars, two-row DP.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over pairs of `edit_distance(predicted, truth) / |truth|`.
pub fn cer(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut total = 0.0;
    for (index, p) in pairs.iter().enumerate() {
        let len = p.truth.chars().count();
        if len == 0 {
            return Err(MetricsError::EmptyTruth { index });
        }
        total += edit_distance(&p.predicted, &p.truth) as f64 / len as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of exact matches.
pub fn plate_accuracy(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(pairs.iter().filter(|p| p.is_exact()).count() as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

/// Equal-width bins over [0, 1]; the last bin is closed at 1.0.
fn bin_index(confidence: f64, num_bins: usize) -> usize {
    ((confidence * num_bins as f64).floor() as usize).min(num_bins - 1)
}

/// Expected calibration error over `(confidence, correct)` observations, with
/// the per-bin data behind a reliability diagram.
pub fn ece_from_observations(
    observations: &[(f64, bool)],
    num_bins: usize,
) -> Result<(f64, Vec<CalibrationBin>), MetricsError> {
    if num_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    if observations.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut counts = vec![0usize; num_bins];
    let mut correct = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0f64; num_bins];
    for (index, &(c, ok)) in observations.iter().enumerate() {
        if !(0.0..=1.0).contains(&c) {
            return Err(MetricsError::ConfidenceOutOfRange { index, value: c });
        }
        let b = bin_index(c, num_bins);
        counts[b] += 1;
        correct[b] += usize::from(ok);
        conf_sum[b] += c;
    }
    let n = observations.len() as f64;
    let mut ece = 0.0;
    let bins = (0..num_bins)
        .map(|b| {
            let (accuracy, mean_confidence) = if counts[b] == 0 {
                (0.0, 0.0)
            } else {
                let k = counts[b] as f64;
                (correct[b] as f64 / k, conf_sum[b] / k)
            };
            if counts[b] > 0 {
                ece += counts[b] as f64 / n * (accuracy - mean_confidence).abs();
            }
            CalibrationBin {
                lower: b as f64 / num_bins as f64,
                upper: (b + 1) as f64 / num_bins as f64,
                count: counts[b],
                accuracy,
                mean_confidence,
            }
        })
        .collect();
    Ok((ece.clamp(0.0, 1.0), bins))
}

/// ECE of plate predictions; a pair is correct when it is an exact match.
pub fn ece(pairs: &[EvalPair], num_bins: usize) -> Result<(f64, Vec<CalibrationBin>), MetricsError> {
    let obs: Vec<(f64, bool)> = pairs.iter().map(|p| (p.confidence, p.is_exact())).collect();
    ece_from_observations(&obs, num_bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    CharacterSubstitution,
    CharacterOmission,
    CharacterAddition,
    CompleteMiss,
    StateMisclassification,
    FormatError,
    Correct,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::CharacterSubstitution => "character_substitution",
            ErrorCategory::CharacterOmission => "character_omission",
            ErrorCategory::CharacterAddition => "character_addition",
            ErrorCategory::CompleteMiss => "complete_miss",
            ErrorCategory::StateMisclassification => "state_misclassification",
            ErrorCategory::FormatError => "format_error",
            ErrorCategory::Correct => "correct",
        }
    }
}

/// Primary plate-axis label. Precedence: CompleteMiss, FormatError, then the
/// length comparison. Never returns `StateMisclassification`.
pub fn classify_error(pair: &EvalPair, rules: &[PlateFormatRule]) -> ErrorCategory {
    if pair.is_exact() {
        return ErrorCategory::Correct;
    }
    if pair.predicted.is_empty() {
        return ErrorCategory::CompleteMiss;
    }
    if match_format(&pair.predicted, rules) == FormatMatch::Malformed {
        return ErrorCategory::FormatError;
    }
    let (p, t) = (pair.predicted.chars().count(), pair.truth.chars().count());
    match p.cmp(&t) {
        std::cmp::Ordering::Equal => ErrorCategory::CharacterSubstitution,
        std::cmp::Ordering::Less => ErrorCategory::CharacterOmission,
        std::cmp::Ordering::Greater => ErrorCategory::CharacterAddition,
    }
}

/// State axis: `Some(StateMisclassification)` when both states are known and differ.
pub fn classify_state(pair: &EvalPair) -> Option<ErrorCategory> {
    match (&pair.state_predicted, &pair.state_truth) {
        (Some(p), Some(t)) if p != t => Some(ErrorCategory::StateMisclassification),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub cer: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
    /// Plate-axis categories plus `state_misclassification` counted on its own axis.
    pub error_histogram: BTreeMap<String, usize>,
}

pub fn evaluate(pairs: &[EvalPair], num_bins: usize, rules: &[PlateFormatRule]) -> Result<EvalReport, MetricsError> {
    let cer = cer(pairs)?;
    let accuracy = plate_accuracy(pairs)?;
    let (ece, bins) = ece(pairs, num_bins)?;
    let mut error_histogram = BTreeMap::new();
    for p in pairs {
        *error_histogram.entry(classify_error(p, rules).as_str().to_string()).or_insert(0) += 1;
        if let Some(s) = classify_state(p) {
            *error_histogram.entry(s.as_str().to_string()).or_insert(0) += 1;
        }
    }
    Ok(EvalReport { n: pairs.len(), cer, accuracy, ece, bins, error_histogram })
}
