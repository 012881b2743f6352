//! Composite confidence and threshold routing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfidenceError {
    #[error("empty token probability list")]
    EmptyTokenList,
    #[error("token probability {0} outside (0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("{name} = {value} outside [0, 1]")]
    InputOutOfRange { name: &'static str, value: f64 },
    #[error("thresholds must satisfy 0 < review_low < auto_accept <= 1 (got {review_low}, {auto_accept})")]
    BadThresholds { review_low: f64, auto_accept: f64 },
}

/// Probability of the whole generated answer: the product of its token
/// probabilities, accumulated in log space.
pub fn generation_probability(token_probs: &[f64]) -> Result<f64, ConfidenceError> {
    if token_probs.is_empty() {
        return Err(ConfidenceError::EmptyTokenList);
    }
    let mut log_sum = 0.0;
    for &p in token_probs {
        if !(p > 0.0 && p <= 1.0) {
            return Err(ConfidenceError::ProbabilityOutOfRange(p));
        }
        log_sum += p.ln();
    }
    Ok(log_sum.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBreakdown {
    pub generation_prob: f64,
    pub uncertainty_penalty: f64,
    pub format_validity: f64,
    pub combined: f64,
}

fn unit(name: &'static str, value: f64) -> Result<f64, ConfidenceError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(ConfidenceError::InputOutOfRange { name, value })
    }
}

/// `generation_prob * (1 - uncertainty_penalty) * format_validity`, kept with its factors.
pub fn combine(
    generation_prob: f64,
    uncertainty_penalty: f64,
    format_validity: f64,
) -> Result<ConfidenceBreakdown, ConfidenceError> {
    let g = unit("generation_prob", generation_prob)?;
    let u = unit("uncertainty_penalty", uncertainty_penalty)?;
    let v = unit("format_validity", format_validity)?;
    Ok(ConfidenceBreakdown {
        generation_prob: g,
        uncertainty_penalty: u,
        format_validity: v,
        combined: g * (1.0 - u) * v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds")]
pub struct RoutingThresholds {
    auto_accept: f64,
    review_low: f64,
}

#[derive(Deserialize)]
struct RawThresholds {
    auto_accept: f64,
    review_low: f64,
}

impl TryFrom<RawThresholds> for RoutingThresholds {
    type Error = ConfidenceError;

    fn try_from(r: RawThresholds) -> Result<Self, Self::Error> {
        RoutingThresholds::new(r.auto_accept, r.review_low)
    }
}

impl Default for RoutingThresholds {
    fn default() -> Self {
        RoutingThresholds { auto_accept: 0.95, review_low: 0.70 }
    }
}

impl RoutingThresholds {
    pub fn new(auto_accept: f64, review_low: f64) -> Result<Self, ConfidenceError> {
        if 0.0 < review_low && review_low < auto_accept && auto_accept <= 1.0 {
            Ok(RoutingThresholds { auto_accept, review_low })
        } else {
            Err(ConfidenceError::BadThresholds { review_low, auto_accept })
        }
    }

    pub fn auto_accept(&self) -> f64 {
        self.auto_accept
    }

    pub fn review_low(&self) -> f64 {
        self.review_low
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingDecision {
    AutoAccept,
    HumanReview,
    AutoReject,
}

/// Bands are closed at their lower bound.
pub fn route(combined: f64, thresholds: &RoutingThresholds) -> RoutingDecision {
    if combined >= thresholds.auto_accept {
        RoutingDecision::AutoAccept
    } else if combined >= thresholds.review_low {
        RoutingDecision::HumanReview
    } else {
        RoutingDecision::AutoReject
    }
}
