//! Visual-question dispatch.
//!
//! Every recognition task is phrased as a natural-language question against
//! an opaque inference backend. The backend sees an [`ImageRef`] (digest and
//! metadata), never pixels, so the orchestration layer carries no ML runtime.

mod latency;
mod mock;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use latency::{latency_report, ComponentShare, LatencyLog, LatencyReport, Percentiles};
pub use mock::{DefaultBehavior, LatencyModel, MockBackend, MockScript, ScriptKey, ScriptedAnswer};

/// The closed set of questions the system asks about a vehicle image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PlateRecognition,
    StateClassification,
    MakeModel,
    ColorDescription,
    SeatbeltDetection,
    OccupancyCount,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::PlateRecognition,
        TaskKind::StateClassification,
        TaskKind::MakeModel,
        TaskKind::ColorDescription,
        TaskKind::SeatbeltDetection,
        TaskKind::OccupancyCount,
    ];

    /// The four tasks the unified adapter is trained on.
    pub const PRIMARY: [TaskKind; 4] = [
        TaskKind::PlateRecognition,
        TaskKind::StateClassification,
        TaskKind::MakeModel,
        TaskKind::ColorDescription,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::PlateRecognition => "plate_recognition",
            TaskKind::StateClassification => "state_classification",
            TaskKind::MakeModel => "make_model",
            TaskKind::ColorDescription => "color_description",
            TaskKind::SeatbeltDetection => "seatbelt_detection",
            TaskKind::OccupancyCount => "occupancy_count",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("unknown task `{0}`")]
pub struct UnknownTask(pub String);

impl FromStr for TaskKind {
    type Err = UnknownTask;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let task = match s.trim().to_ascii_lowercase().as_str() {
            "plate_recognition" | "plate" => TaskKind::PlateRecognition,
            "state_classification" | "state" => TaskKind::StateClassification,
            "make_model" | "make" => TaskKind::MakeModel,
            "color_description" | "color" => TaskKind::ColorDescription,
            "seatbelt_detection" | "seatbelt" => TaskKind::SeatbeltDetection,
            "occupancy_count" | "occupancy" => TaskKind::OccupancyCount,
            _ => return Err(UnknownTask(s.to_string())),
        };
        Ok(task)
    }
}

/// A catalog prompt: the question text and a description of the expected answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VqaPrompt {
    pub task: TaskKind,
    pub question: &'static str,
    pub expected_format: &'static str,
}

/// Returns the catalog prompt for `task`.
pub fn prompt_for(task: TaskKind) -> VqaPrompt {
    let (question, expected_format) = match task {
        TaskKind::PlateRecognition => (
            "What is the license plate number in this image?",
            "Alphanumeric string (e.g., \"ABC1234\")",
        ),
        TaskKind::StateClassification => (
            "What US state is this license plate from?",
            "Full state name (e.g., \"Texas\", \"California\")",
        ),
        TaskKind::MakeModel => (
            "What is the make and model of this vehicle?",
            "\"Make Model\" (e.g., \"Toyota Camry\")",
        ),
        TaskKind::ColorDescription => (
            "What color is this vehicle?",
            "Color name (e.g., \"Red\", \"White\")",
        ),
        TaskKind::SeatbeltDetection => (
            "Is the driver wearing a seatbelt?",
            "\"Yes\", \"No\", or \"Cannot determine\"",
        ),
        TaskKind::OccupancyCount => (
            "How many people are visible in this vehicle?",
            "Integer or \"Cannot determine\"",
        ),
    };
    VqaPrompt { task, question, expected_format }
}

/// Hex-encoded SHA-256 of image bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ImageDigest(String);

#[derive(Debug, Error)]
#[error("invalid image digest `{0}`: expected 64 lowercase hex characters")]
pub struct InvalidDigest(pub String);

impl ImageDigest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ImageDigest(hex::encode(Sha256::digest(bytes)))
    }

    pub fn parse(s: &str) -> Result<Self, InvalidDigest> {
        let ok = s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if ok {
            Ok(ImageDigest(s.to_string()))
        } else {
            Err(InvalidDigest(s.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ImageDigest {
    type Error = InvalidDigest;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        ImageDigest::parse(&value)
    }
}

impl From<ImageDigest> for String {
    fn from(d: ImageDigest) -> Self {
        d.0
    }
}

impl fmt::Display for ImageDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Reference to a captured image. Pixels stay with the producer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub digest: ImageDigest,
    pub width: u32,
    pub height: u32,
    /// Producer-computed quality in [0, 1].
    pub quality_score: f64,
}

#[derive(Debug, Error, PartialEq)]
#[error("quality score {0} outside [0, 1]")]
pub struct InvalidQuality(pub f64);

impl ImageRef {
    pub fn new(
        id: impl Into<String>,
        digest: ImageDigest,
        width: u32,
        height: u32,
        quality_score: f64,
    ) -> Result<Self, InvalidQuality> {
        let image = ImageRef { id: id.into(), digest, width, height, quality_score };
        image.validate()?;
        Ok(image)
    }

    pub fn from_bytes(
        id: impl Into<String>,
        bytes: &[u8],
        width: u32,
        height: u32,
        quality_score: f64,
    ) -> Result<Self, InvalidQuality> {
        Self::new(id, ImageDigest::of_bytes(bytes), width, height, quality_score)
    }

    pub fn validate(&self) -> Result<(), InvalidQuality> {
        if (0.0..=1.0).contains(&self.quality_score) {
            Ok(())
        } else {
            Err(InvalidQuality(self.quality_score))
        }
    }
}

/// Per-stage wall time in milliseconds. The key set is fixed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentTimings {
    pub preprocess: f64,
    pub tokenize: f64,
    pub encode: f64,
    pub generate: f64,
    pub parse: f64,
}

impl ComponentTimings {
    pub const STAGES: [&'static str; 5] = ["preprocess", "tokenize", "encode", "generate", "parse"];

    pub fn values(&self) -> [f64; 5] {
        [self.preprocess, self.tokenize, self.encode, self.generate, self.parse]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    /// Folds another task's timings into a multi-question pass: the image is
    /// preprocessed and encoded once, each question is tokenized, generated
    /// and parsed on its own.
    pub fn merge_pass(&self, other: &ComponentTimings) -> ComponentTimings {
        ComponentTimings {
            preprocess: self.preprocess.max(other.preprocess),
            tokenize: self.tokenize + other.tokenize,
            encode: self.encode.max(other.encode),
            generate: self.generate + other.generate,
            parse: self.parse + other.parse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub task: TaskKind,
    pub text: String,
    pub token_probs: Vec<f64>,
    pub component_timings: ComponentTimings,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend failed on {task}: {message}")]
    TaskFailed { task: TaskKind, message: String },
}

/// Anything that can answer a catalog question about an image.
///
/// Implementations are shared across request handlers and must tolerate
/// concurrent calls.
pub trait InferenceBackend: Send + Sync {
    fn answer(&self, image: &ImageRef, prompt: &VqaPrompt) -> Result<RawResponse, BackendError>;

    fn version_tag(&self) -> &str;
}

#[derive(Debug, Error, PartialEq)]
pub enum DispatchError {
    #[error("no tasks requested")]
    EmptyTaskSet,
    #[error("every requested task failed")]
    AllTasksFailed(BTreeMap<TaskKind, BackendError>),
}

/// Outcome of one multi-question pass over an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub responses: BTreeMap<TaskKind, RawResponse>,
    pub failures: BTreeMap<TaskKind, BackendError>,
    pub timings: ComponentTimings,
}

/// Asks every task in `tasks` about `image`.
///
/// Each requested task ends up in exactly one of `responses` or `failures`.
/// The merged timings are appended to `log` when one is given.
pub fn dispatch_all(
    image: &ImageRef,
    tasks: &BTreeSet<TaskKind>,
    backend: &dyn InferenceBackend,
    log: Option<&LatencyLog>,
) -> Result<Dispatch, DispatchError> {
    if tasks.is_empty() {
        return Err(DispatchError::EmptyTaskSet);
    }
    let mut responses = BTreeMap::new();
    let mut failures = BTreeMap::new();
    let mut timings: Option<ComponentTimings> = None;
    for &task in tasks {
        match backend.answer(image, &prompt_for(task)) {
            Ok(resp) => {
                timings = Some(match timings {
                    Some(t) => t.merge_pass(&resp.component_timings),
                    None => resp.component_timings,
                });
                responses.insert(task, resp);
            }
            Err(e) => {
                failures.insert(task, e);
            }
        }
    }
    if responses.is_empty() {
        return Err(DispatchError::AllTasksFailed(failures));
    }
    let timings = timings.unwrap_or_default();
    if let Some(log) = log {
        if let Err(e) = log.append(&timings) {
            log::warn!("latency log append failed: {e}");
        }
    }
    Ok(Dispatch { responses, failures, timings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digest(n: u8) -> ImageDigest {
        ImageDigest::of_bytes(&[n])
    }

    fn image(n: u8) -> ImageRef {
        ImageRef::new(format!("img-{n}"), digest(n), 1920, 1080, 0.9).unwrap()
    }

    #[test]
    fn catalog_is_byte_exact() {
        assert_eq!(
            prompt_for(TaskKind::PlateRecognition).question,
            "What is the license plate number in this image?"
        );
        assert_eq!(prompt_for(TaskKind::SeatbeltDetection).question, "Is the driver wearing a seatbelt?");
        assert_eq!(prompt_for(TaskKind::ColorDescription).question, "What color is this vehicle?");
        assert_eq!(
            prompt_for(TaskKind::StateClassification).question,
            "What US state is this license plate from?"
        );
        assert_eq!(
            prompt_for(TaskKind::OccupancyCount).question,
            "How many people are visible in this vehicle?"
        );
        assert_eq!(prompt_for(TaskKind::MakeModel).question, "What is the make and model of this vehicle?");
    }

    #[test]
    fn catalog_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(prompt_for(t).task, t);
            assert_eq!(t.as_str().parse::<TaskKind>().unwrap(), t);
        }
    }

    #[test]
    fn digest_is_stable_and_validated() {
        assert_eq!(ImageDigest::of_bytes(b"abc"), ImageDigest::of_bytes(b"abc"));
        assert_eq!(
            ImageDigest::of_bytes(b"abc").as_str(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(ImageDigest::parse("xyz").is_err());
        let json = serde_json::to_string(&digest(1)).unwrap();
        let back: ImageDigest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, digest(1));
        assert!(serde_json::from_str::<ImageDigest>("\"ABC\"").is_err());
    }

    #[test]
    fn quality_is_bounded() {
        assert_eq!(ImageRef::new("x", digest(0), 1, 1, 1.2).unwrap_err(), InvalidQuality(1.2));
    }

    fn scripted() -> MockBackend {
        let mut script = MockScript::default();
        script
            .insert(&digest(1), TaskKind::PlateRecognition, "ABC1234", vec![0.99, 0.98])
            .unwrap();
        script
            .insert(&digest(1), TaskKind::StateClassification, "Texas", vec![0.97])
            .unwrap();
        MockBackend::new(script, "v1")
    }

    #[test]
    fn dispatch_echoes_script() {
        let backend = scripted();
        let tasks: BTreeSet<_> = [TaskKind::PlateRecognition, TaskKind::StateClassification].into();
        let out = dispatch_all(&image(1), &tasks, &backend, None).unwrap();
        assert_eq!(out.responses.len(), 2);
        assert_eq!(out.responses[&TaskKind::PlateRecognition].text, "ABC1234");
        assert_eq!(out.responses[&TaskKind::StateClassification].text, "Texas");
        assert!(out.failures.is_empty());
    }

    #[test]
    fn dispatch_rejects_empty_task_set() {
        let err = dispatch_all(&image(1), &BTreeSet::new(), &scripted(), None).unwrap_err();
        assert_eq!(err, DispatchError::EmptyTaskSet);
    }

    #[test]
    fn dispatch_reports_partial_failure() {
        let backend = scripted().with_failing_task(TaskKind::StateClassification);
        let tasks: BTreeSet<_> = [TaskKind::PlateRecognition, TaskKind::StateClassification].into();
        let out = dispatch_all(&image(1), &tasks, &backend, None).unwrap();
        assert_eq!(out.responses.len(), 1);
        assert!(out.failures.contains_key(&TaskKind::StateClassification));
        for t in &tasks {
            assert!(out.responses.contains_key(t) ^ out.failures.contains_key(t));
        }
    }

    #[test]
    fn dispatch_all_failed() {
        let backend = scripted().with_failing_task(TaskKind::PlateRecognition);
        let tasks: BTreeSet<_> = [TaskKind::PlateRecognition].into();
        assert!(matches!(
            dispatch_all(&image(1), &tasks, &backend, None),
            Err(DispatchError::AllTasksFailed(_))
        ));
    }

    #[test]
    fn dispatch_appends_one_sample_per_pass() {
        let dir = tempfile::tempdir().unwrap();
        let log = LatencyLog::open(dir.path().join("latency.jsonl")).unwrap();
        let tasks: BTreeSet<_> = [TaskKind::PlateRecognition, TaskKind::StateClassification].into();
        dispatch_all(&image(1), &tasks, &scripted(), Some(&log)).unwrap();
        dispatch_all(&image(2), &tasks, &scripted(), Some(&log)).unwrap();
        assert_eq!(log.samples().unwrap().len(), 2);
    }
}
