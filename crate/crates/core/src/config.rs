//! Service configuration: one JSON file plus a couple of environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::RoutingThresholds;
use crate::gate::GateConfig;
use crate::hitl::{MonitorConfig, QualityConfig, TriggerConfig};
use crate::parser::{default_rules, load_rules, HedgeConfig, PlateFormatRule, ValidityLevels};
use crate::replay::{Hyperparams, MixConfig, MockTrainer, ReplayBuffer, TaskWeights};
use crate::vqa::{DefaultBehavior, LatencyModel, MockScript};

pub const ENV_BIND: &str = "SENTINEL_BIND";
pub const ENV_REGISTRY: &str = "SENTINEL_REGISTRY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("config: {0}")]
    Invalid(String),
    #[error("config: {what} {path} does not exist")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Holds the JSON-lines stores.
    pub data_dir: PathBuf,
    /// Model registry root; `<data_dir>/models` when unset.
    pub registry: Option<PathBuf>,
    pub routing: RoutingThresholds,
    pub trigger: TriggerConfig,
    pub monitor: MonitorConfig,
    pub mix: MixConfig,
    pub task_weights: TaskWeights,
    pub quality: QualityConfig,
    pub gate: GateConfig,
    pub hedges: HedgeConfig,
    pub validity: ValidityLevels,
    /// JSON list of plate format rules; built-in defaults when unset.
    pub format_rules: Option<PathBuf>,
    /// Mock script published as version 1 when the registry is empty.
    pub bootstrap_script: Option<PathBuf>,
    /// Mock script answering images no version has learned.
    pub prior_script: Option<PathBuf>,
    /// JSON-lines of replay examples loaded when the replay store is empty.
    pub replay_seed: Option<PathBuf>,
    pub replay_capacity: usize,
    pub probe_size: usize,
    pub training_steps: usize,
    pub trainer: MockTrainer,
    pub hyperparams: Hyperparams,
    pub mock_default: DefaultBehavior,
    pub latency_model: LatencyModel,
    pub ece_bins: usize,
    pub seed: u64,
    /// fsync every prediction and review line, not only corrections.
    pub durable_predictions: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            registry: None,
            routing: RoutingThresholds::default(),
            trigger: TriggerConfig::default(),
            monitor: MonitorConfig::default(),
            mix: MixConfig::default(),
            task_weights: TaskWeights::default(),
            quality: QualityConfig::default(),
            gate: GateConfig::default(),
            hedges: HedgeConfig::default(),
            validity: ValidityLevels::default(),
            format_rules: None,
            bootstrap_script: None,
            prior_script: None,
            replay_seed: None,
            replay_capacity: ReplayBuffer::DEFAULT_CAPACITY,
            probe_size: 500,
            training_steps: 20,
            trainer: MockTrainer::default(),
            hyperparams: Hyperparams::default(),
            mock_default: DefaultBehavior::default(),
            latency_model: LatencyModel::default(),
            ece_bins: 10,
            seed: 0,
            durable_predictions: false,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config: ServiceConfig = serde_json::from_str(&text)
            .map_err(|source| ConfigError::Json { path: path.to_path_buf(), source })?;
        // Relative paths in the file are relative to the file.
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        for p in [
            &mut self.registry,
            &mut self.format_rules,
            &mut self.bootstrap_script,
            &mut self.prior_script,
            &mut self.replay_seed,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Applies `SENTINEL_BIND` and `SENTINEL_REGISTRY` through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(bind) = lookup(ENV_BIND) {
            self.bind = bind;
        }
        if let Some(reg) = lookup(ENV_REGISTRY) {
            self.registry = Some(PathBuf::from(reg));
        }
    }

    pub fn registry_path(&self) -> PathBuf {
        self.registry.clone().unwrap_or_else(|| self.data_dir.join("models"))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.trigger.validate().map_err(|e| invalid(&e))?;
        self.mix.validate().map_err(|e| invalid(&e))?;
        self.gate.validate().map_err(|e| invalid(&e))?;
        if !(0.0..=1.0).contains(&self.quality.min_quality) {
            return Err(ConfigError::Invalid(format!("quality.min_quality {} outside [0, 1]", self.quality.min_quality)));
        }
        if self.replay_capacity == 0 || self.ece_bins == 0 || self.training_steps == 0 || self.monitor.window_size == 0 {
            return Err(ConfigError::Invalid(
                "replay_capacity, ece_bins, training_steps and monitor.window_size must be positive".into(),
            ));
        }
        let h = &self.hedges;
        if !(h.per_hedge >= 0.0 && h.cap >= 0.0 && h.cap < 1.0) {
            return Err(ConfigError::Invalid("hedge penalties must satisfy 0 <= per_hedge, 0 <= cap < 1".into()));
        }
        for (what, path) in [
            ("format_rules", &self.format_rules),
            ("bootstrap_script", &self.bootstrap_script),
            ("prior_script", &self.prior_script),
            ("replay_seed", &self.replay_seed),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::MissingPath { what, path: p.clone() });
                }
            }
        }
        Ok(())
    }

    pub fn rules(&self) -> Result<Vec<PlateFormatRule>, ConfigError> {
        match &self.format_rules {
            None => Ok(default_rules()),
            Some(p) => load_rules(p).map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display()))),
        }
    }

    pub fn load_script(path: &Path) -> Result<MockScript, ConfigError> {
        MockScript::load(path).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
    }
}
