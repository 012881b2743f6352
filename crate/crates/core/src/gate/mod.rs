//! Validation gating (paired t-test plus forgetting check) and the versioned
//! model registry with atomic activation and rollback.

mod registry;
mod stats;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use registry::{
    FaultHook, ModelVersion, Registry, RegistryError, RegistryIndex, Step, VersionState, COMPLETE_MARKER,
};
pub use stats::{ln_gamma, reg_incomplete_beta, student_t_sf};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GateError {
    #[error("paired t-test needs at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("score lists differ in length ({prod} vs {cand})")]
    LengthMismatch { prod: usize, cand: usize },
    #[error("invalid gate config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Candidate mean improvement is greater than zero.
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// Absent when every delta is identical (zero spread).
    pub t_statistic: Option<f64>,
    pub p_value: f64,
}

/// Paired t-test over per-sample deltas (candidate minus production).
pub fn paired_t_test(deltas: &[f64], alternative: Alternative) -> Result<TTest, GateError> {
    let n = deltas.len();
    if n < 2 {
        return Err(GateError::InsufficientSamples(n));
    }
    let nf = n as f64;
    let mean = deltas.iter().sum::<f64>() / nf;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        let p_value = match alternative {
            Alternative::Greater if mean > 0.0 => 0.0,
            Alternative::TwoSided if mean != 0.0 => 0.0,
            _ => 1.0,
        };
        return Ok(TTest { n, mean, sd, t_statistic: None, p_value });
    }
    let t = mean / (sd / nf.sqrt());
    let df = nf - 1.0;
    let p_value = match alternative {
        Alternative::Greater => student_t_sf(t, df),
        Alternative::TwoSided => (2.0 * student_t_sf(t.abs(), df)).min(1.0),
    };
    Ok(TTest { n, mean, sd, t_statistic: Some(t), p_value: p_value.clamp(0.0, 1.0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub alpha: f64,
    pub forgetting_limit: f64,
    pub alternative: Alternative,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { alpha: 0.05, forgetting_limit: 0.02, alternative: Alternative::Greater }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(GateError::InvalidConfig(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.forgetting_limit >= 0.0) {
            return Err(GateError::InvalidConfig("forgetting_limit must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRejection {
    NotSignificant,
    Forgetting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Deploy,
    Reject(GateRejection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub n: usize,
    pub mean_delta: f64,
    pub t_statistic: Option<f64>,
    pub p_value: f64,
    pub forgetting_drop: f64,
    pub prod_heldout_acc: f64,
    pub cand_heldout_acc: f64,
    pub decision: GateDecision,
}

/// Slack for accuracy differences that are exact in decimal but not in binary.
const DROP_EPSILON: f64 = 1e-9;

/// Forgetting is checked first: a candidate that regresses is rejected for
/// that reason even when it is also not significant.
pub fn decide(p_value: f64, forgetting_drop: f64, config: &GateConfig) -> GateDecision {
    if forgetting_drop > config.forgetting_limit + DROP_EPSILON {
        GateDecision::Reject(GateRejection::Forgetting)
    } else if p_value < config.alpha {
        GateDecision::Deploy
    } else {
        GateDecision::Reject(GateRejection::NotSignificant)
    }
}

/// Compares candidate and production on paired per-sample correctness and
/// on held-out (forgetting probe) accuracy.
pub fn evaluate_gate(
    prod_scores: &[f64],
    cand_scores: &[f64],
    prod_heldout_acc: f64,
    cand_heldout_acc: f64,
    config: &GateConfig,
) -> Result<GateReport, GateError> {
    if prod_scores.len() != cand_scores.len() {
        return Err(GateError::LengthMismatch { prod: prod_scores.len(), cand: cand_scores.len() });
    }
    let deltas: Vec<f64> = cand_scores.iter().zip(prod_scores).map(|(c, p)| c - p).collect();
    let test = paired_t_test(&deltas, config.alternative)?;
    let forgetting_drop = prod_heldout_acc - cand_heldout_acc;
    Ok(GateReport {
        n: test.n,
        mean_delta: test.mean,
        t_statistic: test.t_statistic,
        p_value: test.p_value,
        forgetting_drop,
        prod_heldout_acc,
        cand_heldout_acc,
        decision: decide(test.p_value, forgetting_drop, config),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_test_examples() {
        let r = paired_t_test(&[0.0; 5], Alternative::Greater).unwrap();
        assert_eq!((r.p_value, r.t_statistic), (1.0, None));
        let r = paired_t_test(&[0.02, 0.01, 0.03, 0.00, 0.02], Alternative::Greater).unwrap();
        assert!((r.t_statistic.unwrap() - 3.138).abs() < 1e-3);
        assert!((r.p_value - 0.0175).abs() < 1e-3);
        assert!((student_t_sf(2.0, 9.0) - 0.0382).abs() < 1e-3);
        let r = paired_t_test(&[1.0, 1.0, 1.0], Alternative::Greater).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert_eq!(paired_t_test(&[1.0], Alternative::Greater), Err(GateError::InsufficientSamples(1)));
    }

    #[test]
    fn two_sided_doubles_the_tail() {
        let d = [0.3, -0.1, 0.2, 0.4, 0.0, 0.1];
        let one = paired_t_test(&d, Alternative::Greater).unwrap();
        let two = paired_t_test(&d, Alternative::TwoSided).unwrap();
        assert!((two.p_value - 2.0 * one.p_value).abs() < 1e-12);
    }

    #[test]
    fn gate_scenarios() {
        let c = GateConfig::default();
        assert_eq!(decide(0.01, 0.01, &c), GateDecision::Deploy);
        assert_eq!(decide(0.20, 0.0, &c), GateDecision::Reject(GateRejection::NotSignificant));
        assert_eq!(decide(0.01, 0.03, &c), GateDecision::Reject(GateRejection::Forgetting));
        assert_eq!(decide(0.01, 0.92 - 0.90, &c), GateDecision::Deploy);
        assert_eq!(decide(0.05, 0.0, &c), GateDecision::Reject(GateRejection::NotSignificant));
    }

    #[test]
    fn evaluate_gate_end_to_end() {
        let prod = vec![0.0; 20];
        let cand: Vec<f64> = (0..20).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 }).collect();
        let r = evaluate_gate(&prod, &cand, 0.95, 0.94, &GateConfig::default()).unwrap();
        assert_eq!(r.decision, GateDecision::Deploy);
        assert!((r.forgetting_drop - 0.01).abs() < 1e-12);
        let r = evaluate_gate(&prod, &cand, 0.95, 0.90, &GateConfig::default()).unwrap();
        assert_eq!(r.decision, GateDecision::Reject(GateRejection::Forgetting));
        assert!(matches!(
            evaluate_gate(&prod, &cand[..3], 1.0, 1.0, &GateConfig::default()),
            Err(GateError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn report_serializes_decision() {
        let r = evaluate_gate(&[0.0, 0.0], &[0.0, 0.0], 1.0, 1.0, &GateConfig::default()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["decision"], serde_json::json!({"reject": "not_significant"}));
    }
}
