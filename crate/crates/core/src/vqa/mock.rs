//! Deterministic scripted backend standing in for the fine-tuned VLM.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    BackendError, ComponentTimings, ImageDigest, ImageRef, InferenceBackend, RawResponse, TaskKind,
    VqaPrompt,
};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("invalid script entry `{key}`: {reason}")]
    InvalidScript { key: String, reason: String },
    #[error("script io: {0}")]
    Io(#[from] std::io::Error),
    #[error("script json: {0}")]
    Json(#[from] serde_json::Error),
}

/// `<digest>/<task>` lookup key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScriptKey {
    pub digest: ImageDigest,
    pub task: TaskKind,
}

impl fmt::Display for ScriptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.digest, self.task)
    }
}

impl FromStr for ScriptKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (digest, task) = s.split_once('/').ok_or_else(|| "missing `/`".to_string())?;
        Ok(ScriptKey {
            digest: ImageDigest::parse(digest).map_err(|e| e.to_string())?,
            task: task.parse().map_err(|e: super::UnknownTask| e.to_string())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAnswer {
    pub text: String,
    pub token_probs: Vec<f64>,
}

fn check_probs(probs: &[f64]) -> Result<(), String> {
    if probs.is_empty() {
        return Err("token_probs is empty".into());
    }
    match probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        Some(p) => Err(format!("probability {p} outside (0, 1]")),
        None => Ok(()),
    }
}

/// Scripted answers keyed by image digest and task.
///
/// Serialized as the JSON map `{"<digest>/<task>": {"text": .., "token_probs": [..]}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, ScriptedAnswer>", into = "BTreeMap<String, ScriptedAnswer>")]
pub struct MockScript {
    entries: BTreeMap<ScriptKey, ScriptedAnswer>,
}

impl TryFrom<BTreeMap<String, ScriptedAnswer>> for MockScript {
    type Error = ScriptError;

    fn try_from(raw: BTreeMap<String, ScriptedAnswer>) -> Result<Self, Self::Error> {
        let mut entries = BTreeMap::new();
        for (key, answer) in raw {
            let parsed: ScriptKey = key
                .parse()
                .map_err(|reason| ScriptError::InvalidScript { key: key.clone(), reason })?;
            check_probs(&answer.token_probs)
                .map_err(|reason| ScriptError::InvalidScript { key: key.clone(), reason })?;
            entries.insert(parsed, answer);
        }
        Ok(MockScript { entries })
    }
}

impl From<MockScript> for BTreeMap<String, ScriptedAnswer> {
    fn from(script: MockScript) -> Self {
        script.entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

impl MockScript {
    pub fn from_json(json: &str) -> Result<Self, ScriptError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn insert(
        &mut self,
        digest: &ImageDigest,
        task: TaskKind,
        text: impl Into<String>,
        token_probs: Vec<f64>,
    ) -> Result<(), ScriptError> {
        let key = ScriptKey { digest: digest.clone(), task };
        check_probs(&token_probs)
            .map_err(|reason| ScriptError::InvalidScript { key: key.to_string(), reason })?;
        self.entries.insert(key, ScriptedAnswer { text: text.into(), token_probs });
        Ok(())
    }

    pub fn get(&self, digest: &ImageDigest, task: TaskKind) -> Option<&ScriptedAnswer> {
        self.entries.get(&ScriptKey { digest: digest.clone(), task })
    }

    pub fn remove(&mut self, key: &ScriptKey) -> Option<ScriptedAnswer> {
        self.entries.remove(key)
    }

    pub fn contains(&self, key: &ScriptKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ScriptKey> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ScriptKey, &ScriptedAnswer)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Answer given for unscripted (digest, task) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultBehavior {
    pub text: String,
    pub probability: f64,
}

impl Default for DefaultBehavior {
    fn default() -> Self {
        DefaultBehavior { text: "UNKNOWN".to_string(), probability: 0.10 }
    }
}

/// Synthetic per-stage latency: base times with a jitter fraction derived
/// from a hash of the lookup key, so identical queries report identical times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base: ComponentTimings,
    pub jitter: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            base: ComponentTimings { preprocess: 3.0, tokenize: 1.0, encode: 45.0, generate: 89.0, parse: 18.0 },
            jitter: 0.15,
        }
    }
}

impl LatencyModel {
    fn timings_for(&self, key: &str) -> ComponentTimings {
        let hash = Sha256::digest(key.as_bytes());
        let unit = |i: usize| {
            let b = u16::from_le_bytes([hash[2 * i], hash[2 * i + 1]]);
            (b as f64 / u16::MAX as f64) * 2.0 - 1.0
        };
        let scale = |base: f64, i: usize| {
            let ms = base * (1.0 + self.jitter * unit(i));
            (ms * 1000.0).round() / 1000.0
        };
        ComponentTimings {
            preprocess: scale(self.base.preprocess, 0),
            tokenize: scale(self.base.tokenize, 1),
            encode: scale(self.base.encode, 2),
            generate: scale(self.base.generate, 3),
            parse: scale(self.base.parse, 4),
        }
    }
}

/// Scripted inference backend. `answer` is a pure function of
/// (image digest, prompt, version tag).
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
    prior: Option<Arc<MockScript>>,
    default: DefaultBehavior,
    version_tag: String,
    latency: LatencyModel,
    failing: BTreeSet<TaskKind>,
}

impl MockBackend {
    pub fn new(script: MockScript, version_tag: impl Into<String>) -> Self {
        MockBackend {
            script,
            prior: None,
            default: DefaultBehavior::default(),
            version_tag: version_tag.into(),
            latency: LatencyModel::default(),
            failing: BTreeSet::new(),
        }
    }

    pub fn with_default(mut self, default: DefaultBehavior) -> Result<Self, ScriptError> {
        check_probs(&[default.probability]).map_err(|reason| ScriptError::InvalidScript {
            key: "<default>".into(),
            reason,
        })?;
        self.default = default;
        Ok(self)
    }

    /// Answers for images the adapter never learned: consulted after the
    /// version's own script and before the default behavior. Shared by every
    /// model version, so training never changes it.
    pub fn with_prior(mut self, prior: Arc<MockScript>) -> Self {
        self.prior = Some(prior);
        self
    }

    pub fn with_latency(mut self, latency: LatencyModel) -> Self {
        self.latency = latency;
        self
    }

    /// Fault injection: every query for `task` fails.
    pub fn with_failing_task(mut self, task: TaskKind) -> Self {
        self.failing.insert(task);
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

impl InferenceBackend for MockBackend {
    fn answer(&self, image: &ImageRef, prompt: &VqaPrompt) -> Result<RawResponse, BackendError> {
        if self.failing.contains(&prompt.task) {
            return Err(BackendError::TaskFailed {
                task: prompt.task,
                message: "injected failure".into(),
            });
        }
        let key = format!("{}/{}/{}", image.digest, prompt.task, self.version_tag);
        let scripted = self
            .script
            .get(&image.digest, prompt.task)
            .or_else(|| self.prior.as_ref().and_then(|p| p.get(&image.digest, prompt.task)));
        let (text, token_probs) = match scripted {
            Some(a) => (a.text.clone(), a.token_probs.clone()),
            None => (self.default.text.clone(), vec![self.default.probability]),
        };
        Ok(RawResponse {
            task: prompt.task,
            text,
            token_probs,
            component_timings: self.latency.timings_for(&key),
        })
    }

    fn version_tag(&self) -> &str {
        &self.version_tag
    }
}
