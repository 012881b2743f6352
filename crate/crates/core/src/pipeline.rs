//! The recognition pipeline as an in-process state machine.
//!
//! `recognize` runs dispatch, parsing, confidence and routing; review calls
//! feed the correction log, the accuracy monitor and the trigger; a fired
//! trigger yields a [`JobTicket`] that the caller executes with
//! [`Pipeline::run_job`], inline or on a worker thread. Inference and training
//! share only the registry's `current` link, so a running job never blocks
//! recognition.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::confidence::{combine, generation_probability, route, ConfidenceBreakdown, RoutingDecision};
use crate::config::{ConfigError, ServiceConfig};
use crate::gate::{evaluate_gate, GateDecision, GateReport, Registry, RegistryError, RegistryIndex};
use crate::hitl::{
    should_train, AccuracyMonitor, CorrectionLog, CorrectionRecord, CorrectionStatus, HitlError, RejectReason,
    ReviewEvent, TriggerDecision, TriggerReason, TriggerState,
};
use crate::metrics::{cer, ece, EvalPair};
use crate::parser::{normalize_value, parse, ParseError, ParsedAnswer, ParserContext};
use crate::replay::{
    compose_batch_with, ReplayError, ReplayExample, ReplaySource, ReplayStore, TrainerBackend, TrainingBatch,
    TrainingExample, TrainingInput,
};
use crate::store::{self, JsonlWriter, StoreError};
use crate::vqa::{
    dispatch_all, prompt_for, ComponentTimings, DispatchError, ImageRef, InferenceBackend, LatencyLog, LatencyReport,
    MockBackend, MockScript, TaskKind,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("every correction was rejected")]
    Rejected { outcomes: Vec<CorrectionOutcome> },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no previous model version")]
    NoPreviousVersion,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Hitl(#[from] HitlError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Internal(String),
}

impl PipelineError {
    pub fn http_status(&self) -> u16 {
        match self {
            PipelineError::BadRequest(_) => 400,
            PipelineError::NotFound(_) => 404,
            PipelineError::Conflict(_) | PipelineError::NoPreviousVersion => 409,
            PipelineError::Rejected { .. } => 422,
            PipelineError::BackendUnavailable(_) => 503,
            _ => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizeRequest {
    pub image: ImageRef,
    /// Defaults to the four primary tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<TaskKind>>,
    /// Event time; the wall clock when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub image: ImageRef,
    pub answers: BTreeMap<TaskKind, ParsedAnswer>,
    pub confidence: BTreeMap<TaskKind, ConfidenceBreakdown>,
    /// Tasks whose backend call failed, with the error text.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<TaskKind, String>,
    /// Tasks whose answer could not be parsed; their value is empty.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub parse_failures: BTreeSet<TaskKind>,
    pub routing: RoutingDecision,
    pub model_version: u64,
    pub latency: ComponentTimings,
    pub created_at: DateTime<Utc>,
}

impl PredictionRecord {
    pub fn plate(&self) -> Option<&str> {
        self.answers.get(&TaskKind::PlateRecognition).map(|a| a.value.as_str())
    }

    fn seq(&self) -> u64 {
        parse_seq(&self.id, 'p').expect("prediction ids are generated")
    }
}

fn parse_seq(id: &str, prefix: char) -> Option<u64> {
    id.strip_prefix(prefix)?.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewAction {
    Confirmed,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub task: TaskKind,
    pub value: String,
    pub status: CorrectionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub prediction_id: String,
    pub action: ReviewAction,
    pub operator_id: String,
    pub at: DateTime<Utc>,
    pub model_version: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrections: Vec<CorrectionOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmRequest {
    #[serde(default = "default_operator")]
    pub operator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectRequest {
    pub values: BTreeMap<TaskKind, String>,
    #[serde(default = "default_operator")]
    pub operator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<DateTime<Utc>>,
}

fn default_operator() -> String {
    "operator".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub prediction_id: String,
    pub action: ReviewAction,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrections: Vec<CorrectionOutcome>,
    pub pending_corrections: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<TriggerReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    /// The trigger fired while a job was running; it is re-checked when that job ends.
    #[serde(default)]
    pub job_queued: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicateRequest {
    pub accept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationOutcome {
    pub correction: CorrectionRecord,
    pub pending_corrections: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<TriggerReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    #[serde(default)]
    pub job_queued: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub reason: TriggerReason,
    pub status: JobStatus,
    pub created_at: DateTime<Utc>,
    pub base_version: u64,
    pub correction_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_report: Option<GateReport>,
    #[serde(default)]
    pub deployed: bool,
    /// Accuracy on this job's corrections of the model serving after the job.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learned_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_share: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgotten: Option<usize>,
    #[serde(default)]
    pub batches: usize,
    /// SHA-256 over the batch manifest (pool digests and sampled indices).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A started training job, ready to execute.
#[derive(Debug, Clone)]
pub struct JobTicket {
    pub job_id: String,
    seq: u64,
    reason: TriggerReason,
    at: DateTime<Utc>,
    base_version: u64,
    corrections: Vec<CorrectionRecord>,
    replay: Arc<Vec<TrainingExample>>,
    probe: Arc<Vec<ProbeItem>>,
}

impl JobTicket {
    pub fn reason(&self) -> TriggerReason {
        self.reason
    }

    pub fn correction_count(&self) -> usize {
        self.corrections.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub image: ImageRef,
    pub truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PipelineEvent {
    QueueAdded { prediction: PredictionRecord },
    QueueRemoved { prediction_id: String, action: ReviewAction },
    JobStarted { job: JobRecord },
    JobFinished { job: JobRecord },
    ModelSwapped { from: u64, to: u64 },
}

/// Event callback. Runs on the thread that caused the event, possibly while
/// pipeline locks are held, so it must not call back into the pipeline.
pub type Listener = Box<dyn Fn(&PipelineEvent) + Send + Sync>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingCounts {
    pub auto_accept: usize,
    pub human_review: usize,
    pub auto_reject: usize,
}

impl RoutingCounts {
    fn add(&mut self, r: RoutingDecision) {
        match r {
            RoutingDecision::AutoAccept => self.auto_accept += 1,
            RoutingDecision::HumanReview => self.human_review += 1,
            RoutingDecision::AutoReject => self.auto_reject += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.auto_accept + self.human_review + self.auto_reject
    }

    pub fn fractions(&self) -> BTreeMap<RoutingDecision, f64> {
        let n = self.total().max(1) as f64;
        BTreeMap::from([
            (RoutingDecision::AutoAccept, self.auto_accept as f64 / n),
            (RoutingDecision::HumanReview, self.human_review as f64 / n),
            (RoutingDecision::AutoReject, self.auto_reject as f64 / n),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub predictions: usize,
    pub routing: RoutingCounts,
    pub routing_fractions: BTreeMap<RoutingDecision, f64>,
    pub queue_length: usize,
    pub secondary_review_length: usize,
    pub rolling_accuracy: Option<f64>,
    pub baseline_accuracy: Option<f64>,
    pub pending_corrections: usize,
    pub oldest_pending_at: Option<DateTime<Utc>>,
    pub min_corrections: usize,
    pub max_corrections: usize,
    pub labeled: usize,
    pub cer: Option<f64>,
    pub ece: Option<f64>,
    pub latency: Option<LatencyReport>,
    pub active_version: u64,
    pub previous_version: Option<u64>,
    pub jobs: usize,
    pub job_running: bool,
    pub last_gate_report: Option<GateReport>,
    pub probe_size: usize,
    pub probe_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePage {
    pub items: Vec<PredictionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_cursor: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackOutcome {
    pub current: u64,
    pub previous: u64,
}

struct ActiveModel {
    version: u64,
    backend: MockBackend,
}

struct State {
    records: HashMap<String, PredictionRecord>,
    resolved: HashSet<String>,
    queue: BTreeMap<(DateTime<Utc>, u64), String>,
    next_prediction: u64,
    routing: RoutingCounts,
    corrections: CorrectionLog,
    consumed: HashSet<String>,
    in_flight: HashSet<String>,
    jobs: BTreeMap<u64, JobRecord>,
    next_job: u64,
    job_running: bool,
    rerun: bool,
    last_event_at: Option<DateTime<Utc>>,
    monitor: AccuracyMonitor,
    replay: ReplayStore,
    probe: Option<Arc<Vec<ProbeItem>>>,
    labeled: Vec<EvalPair>,
}

impl State {
    fn pending(&self) -> impl Iterator<Item = &CorrectionRecord> {
        self.corrections
            .accepted()
            .filter(|r| !self.consumed.contains(&r.id) && !self.in_flight.contains(&r.id))
    }

    fn trigger_state(&self) -> TriggerState {
        let (count, oldest) = self.pending().fold((0, None::<DateTime<Utc>>), |(n, o), r| {
            (n + 1, Some(o.map_or(r.created_at, |o| o.min(r.created_at))))
        });
        TriggerState {
            pending_count: count,
            oldest_pending_at: oldest,
            baseline_accuracy: self.monitor.baseline(),
            current_accuracy: self.monitor.current(),
        }
    }
}

pub struct Pipeline {
    config: ServiceConfig,
    ctx: ParserContext,
    registry: Registry,
    prior: Option<Arc<MockScript>>,
    model: RwLock<Arc<ActiveModel>>,
    latency: LatencyLog,
    predictions: JsonlWriter<PredictionRecord>,
    reviews: JsonlWriter<ReviewRecord>,
    jobs_log: JsonlWriter<JobRecord>,
    trainer: Box<dyn TrainerBackend>,
    state: Mutex<State>,
    listeners: RwLock<Vec<Listener>>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("data_dir", &self.config.data_dir).finish_non_exhaustive()
    }
}

fn now_or(at: Option<DateTime<Utc>>) -> DateTime<Utc> {
    at.unwrap_or_else(Utc::now)
}

/// Normalized answer value, or empty when the response does not parse.
fn answer_value(backend: &dyn InferenceBackend, image: &ImageRef, task: TaskKind, ctx: &ParserContext) -> String {
    backend
        .answer(image, &prompt_for(task))
        .ok()
        .and_then(|raw| parse(&raw, ctx).ok())
        .map(|a| a.value)
        .unwrap_or_default()
}

impl Pipeline {
    pub fn open(config: ServiceConfig) -> Result<Self, PipelineError> {
        let trainer = Box::new(config.trainer.clone());
        Self::open_with_trainer(config, trainer)
    }

    pub fn open_with_trainer(config: ServiceConfig, trainer: Box<dyn TrainerBackend>) -> Result<Self, PipelineError> {
        config.validate()?;
        let dir = config.data_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| PipelineError::Internal(format!("{}: {e}", dir.display())))?;
        let ctx = ParserContext {
            rules: config.rules()?,
            hedges: config.hedges.clone(),
            validity: config.validity,
            ..ParserContext::default()
        };
        let registry = Registry::open(config.registry_path())?;
        if registry.current_version()?.is_none() {
            let script = match &config.bootstrap_script {
                Some(p) => ServiceConfig::load_script(p)?,
                None => MockScript::default(),
            };
            let v = registry.publish(&script, None, Utc::now())?;
            registry.activate_bootstrap(v.version)?;
        }
        let prior = match &config.prior_script {
            Some(p) => Some(Arc::new(ServiceConfig::load_script(p)?)),
            None => None,
        };
        let version = registry.current_version()?.expect("bootstrapped");
        let durable = config.durable_predictions;
        let (predictions, prediction_lines) = JsonlWriter::<PredictionRecord>::open(dir.join("predictions.jsonl"), durable)?;
        let (reviews, review_lines) = JsonlWriter::<ReviewRecord>::open(dir.join("reviews.jsonl"), durable)?;
        let (jobs_log, job_lines) = JsonlWriter::<JobRecord>::open(dir.join("jobs.jsonl"), true)?;
        let latency = LatencyLog::open(dir.join("latency.jsonl"))
            .map_err(|e| PipelineError::Internal(format!("latency log: {e}")))?;
        let corrections = CorrectionLog::open(dir.join("corrections.jsonl"))?;
        let mut replay = ReplayStore::open(dir.join("replay.jsonl"), config.replay_capacity)?;
        if replay.buffer().is_empty() {
            if let Some(seed) = &config.replay_seed {
                for e in store::recover::<ReplayExample>(seed)? {
                    replay.push(e)?;
                }
            }
        }
        let probe_path = dir.join("probe.json");
        let probe = match fs::read(&probe_path) {
            Ok(bytes) => Some(Arc::new(
                serde_json::from_slice::<Vec<ProbeItem>>(&bytes)
                    .map_err(|e| PipelineError::Internal(format!("{}: {e}", probe_path.display())))?,
            )),
            Err(_) => None,
        };

        let mut state = State {
            records: HashMap::new(),
            resolved: HashSet::new(),
            queue: BTreeMap::new(),
            next_prediction: 1,
            routing: RoutingCounts::default(),
            corrections,
            consumed: HashSet::new(),
            in_flight: HashSet::new(),
            jobs: BTreeMap::new(),
            next_job: 1,
            job_running: false,
            rerun: false,
            last_event_at: None,
            monitor: AccuracyMonitor::new(config.monitor),
            replay,
            probe,
            labeled: Vec::new(),
        };
        for r in prediction_lines {
            state.next_prediction = state.next_prediction.max(r.seq() + 1);
            state.routing.add(r.routing);
            state.records.insert(r.id.clone(), r);
        }
        for review in &review_lines {
            state.resolved.insert(review.prediction_id.clone());
            if let Some(p) = state.records.get(&review.prediction_id) {
                if let Some(pair) = labeled_pair(p, review) {
                    state.labeled.push(pair);
                }
                if p.model_version == version {
                    state.monitor.record(review_event(review.action));
                }
            }
            state.last_event_at = Some(review.at);
        }
        for r in state.records.values() {
            if r.routing != RoutingDecision::AutoAccept && !state.resolved.contains(&r.id) {
                state.queue.insert((r.created_at, r.seq()), r.id.clone());
            }
        }
        let mut jobs: BTreeMap<u64, JobRecord> = BTreeMap::new();
        for j in job_lines {
            let seq = j.id.strip_prefix("job-").and_then(|s| s.parse().ok()).unwrap_or(0);
            jobs.insert(seq, j);
        }
        for (seq, job) in jobs.iter_mut() {
            if job.status == JobStatus::Running {
                job.status = JobStatus::Failed;
                job.error = Some("interrupted".into());
                jobs_log.append(job)?;
            }
            if job.status == JobStatus::Succeeded {
                state.consumed.extend(job.correction_ids.iter().cloned());
            }
            state.next_job = state.next_job.max(seq + 1);
        }
        state.jobs = jobs;

        let model = ActiveModel { version, backend: Self::backend_for(&config, prior.clone(), version, registry.load_script(version)?) };
        Ok(Pipeline {
            config,
            ctx,
            registry,
            prior,
            model: RwLock::new(Arc::new(model)),
            latency,
            predictions,
            reviews,
            jobs_log,
            trainer,
            state: Mutex::new(state),
            listeners: RwLock::new(Vec::new()),
        })
    }

    fn backend_for(config: &ServiceConfig, prior: Option<Arc<MockScript>>, version: u64, script: MockScript) -> MockBackend {
        let mut b = MockBackend::new(script, format!("v{version}"))
            .with_latency(config.latency_model.clone())
            .with_default(config.mock_default.clone())
            .unwrap_or_else(|_| MockBackend::new(MockScript::default(), format!("v{version}")));
        if let Some(p) = prior {
            b = b.with_prior(p);
        }
        b
    }

    fn make_backend(&self, version: u64, script: MockScript) -> MockBackend {
        Self::backend_for(&self.config, self.prior.clone(), version, script)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn parser_context(&self) -> &ParserContext {
        &self.ctx
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn subscribe(&self, listener: Listener) {
        self.listeners.write().unwrap_or_else(|p| p.into_inner()).push(listener);
    }

    fn emit(&self, event: PipelineEvent) {
        for l in self.listeners.read().unwrap_or_else(|p| p.into_inner()).iter() {
            l(&event);
        }
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// The serving model, reloaded when the `current` link has moved.
    fn active_model(&self) -> Result<Arc<ActiveModel>, PipelineError> {
        let v = self
            .registry
            .current_version()?
            .ok_or_else(|| PipelineError::Internal("registry has no active version".into()))?;
        {
            let m = self.model.read().unwrap_or_else(|p| p.into_inner());
            if m.version == v {
                return Ok(m.clone());
            }
        }
        let mut w = self.model.write().unwrap_or_else(|p| p.into_inner());
        if w.version == v {
            return Ok(w.clone());
        }
        let script = self.registry.load_script(v)?;
        let fresh = Arc::new(ActiveModel { version: v, backend: self.make_backend(v, script) });
        let from = w.version;
        *w = fresh.clone();
        drop(w);
        self.state().monitor.on_swap();
        log::info!("model swap v{from} -> v{v}");
        self.emit(PipelineEvent::ModelSwapped { from, to: v });
        Ok(fresh)
    }

    pub fn active_version(&self) -> Result<u64, PipelineError> {
        Ok(self.active_model()?.version)
    }

    pub fn recognize(&self, req: RecognizeRequest) -> Result<PredictionRecord, PipelineError> {
        req.image.validate().map_err(|e| PipelineError::BadRequest(e.to_string()))?;
        let tasks: BTreeSet<TaskKind> = match &req.tasks {
            Some(t) => t.iter().copied().collect(),
            None => TaskKind::PRIMARY.into_iter().collect(),
        };
        let model = self.active_model()?;
        let dispatch = match dispatch_all(&req.image, &tasks, &model.backend, Some(&self.latency)) {
            Ok(d) => d,
            Err(DispatchError::EmptyTaskSet) => return Err(PipelineError::BadRequest("no tasks requested".into())),
            Err(DispatchError::AllTasksFailed(f)) => {
                let msg = f.values().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
                return Err(PipelineError::BackendUnavailable(msg));
            }
        };
        let mut answers = BTreeMap::new();
        let mut confidence = BTreeMap::new();
        let mut failures: BTreeMap<TaskKind, String> =
            dispatch.failures.iter().map(|(t, e)| (*t, e.to_string())).collect();
        let mut parse_failures = BTreeSet::new();
        for (task, raw) in &dispatch.responses {
            let g = match generation_probability(&raw.token_probs) {
                Ok(g) => g,
                Err(e) => {
                    failures.insert(*task, e.to_string());
                    continue;
                }
            };
            let answer = match parse(raw, &self.ctx) {
                Ok(a) => a,
                Err(ParseError::ParseFailure { hedge_terms, .. }) => {
                    parse_failures.insert(*task);
                    let penalty = (self.ctx.hedges.per_hedge * hedge_terms.len() as f64).min(self.ctx.hedges.cap);
                    ParsedAnswer {
                        task: *task,
                        value: String::new(),
                        hedge_terms,
                        uncertainty_penalty: penalty,
                        format_validity: self.ctx.validity.malformed,
                        raw_text: raw.text.clone(),
                    }
                }
            };
            let breakdown = combine(g, answer.uncertainty_penalty, answer.format_validity)
                .map_err(|e| PipelineError::Internal(e.to_string()))?;
            confidence.insert(*task, breakdown);
            answers.insert(*task, answer);
        }
        if answers.is_empty() {
            let msg = failures.values().cloned().collect::<Vec<_>>().join("; ");
            return Err(PipelineError::BackendUnavailable(msg));
        }
        let routing = if tasks.contains(&TaskKind::PlateRecognition) {
            match confidence.get(&TaskKind::PlateRecognition) {
                Some(c) => route(c.combined, &self.config.routing),
                None => RoutingDecision::AutoReject,
            }
        } else {
            let min = confidence.values().map(|c| c.combined).fold(f64::INFINITY, f64::min);
            route(min, &self.config.routing)
        };
        let created_at = now_or(req.at);
        let mut st = self.state();
        let seq = st.next_prediction;
        let record = PredictionRecord {
            id: format!("p{seq:08}"),
            image: req.image,
            answers,
            confidence,
            failures,
            parse_failures,
            routing,
            model_version: model.version,
            latency: dispatch.timings,
            created_at,
        };
        self.predictions.append(&record)?;
        st.next_prediction += 1;
        st.routing.add(routing);
        st.records.insert(record.id.clone(), record.clone());
        if routing != RoutingDecision::AutoAccept {
            st.queue.insert((created_at, seq), record.id.clone());
            self.emit(PipelineEvent::QueueAdded { prediction: record.clone() });
        }
        Ok(record)
    }

    pub fn prediction(&self, id: &str) -> Option<PredictionRecord> {
        self.state().records.get(id).cloned()
    }

    /// Pending review items in arrival order, after `cursor` (a prediction id).
    pub fn review_queue(&self, limit: usize, cursor: Option<&str>) -> Result<QueuePage, PipelineError> {
        if limit == 0 {
            return Err(PipelineError::BadRequest("limit must be at least 1".into()));
        }
        let st = self.state();
        let start = match cursor {
            None => None,
            Some(c) => {
                let r = st.records.get(c).ok_or_else(|| PipelineError::BadRequest(format!("bad cursor `{c}`")))?;
                Some((r.created_at, r.seq()))
            }
        };
        let mut iter = st
            .queue
            .iter()
            .filter(|(k, _)| start.is_none_or(|s| **k > s))
            .map(|(_, id)| st.records[id].clone());
        let items: Vec<_> = iter.by_ref().take(limit).collect();
        let more = iter.next().is_some();
        let next_cursor = if more { items.last().map(|r| r.id.clone()) } else { None };
        Ok(QueuePage { items, next_cursor })
    }

    fn pending_item(&self, st: &State, id: &str) -> Result<PredictionRecord, PipelineError> {
        let r = st.records.get(id).ok_or_else(|| PipelineError::NotFound(format!("prediction `{id}`")))?;
        if st.resolved.contains(id) {
            return Err(PipelineError::Conflict(format!("prediction `{id}` is already resolved")));
        }
        if r.routing == RoutingDecision::AutoAccept {
            return Err(PipelineError::Conflict(format!("prediction `{id}` was auto-accepted")));
        }
        Ok(r.clone())
    }

    fn resolve(&self, st: &mut State, record: &PredictionRecord, review: &ReviewRecord) -> Result<(), PipelineError> {
        self.reviews.append(review)?;
        st.resolved.insert(record.id.clone());
        st.queue.remove(&(record.created_at, record.seq()));
        if let Some(pair) = labeled_pair(record, review) {
            st.labeled.push(pair);
        }
        let active = self.model.read().unwrap_or_else(|p| p.into_inner()).version;
        if record.model_version == active {
            st.monitor.record(review_event(review.action));
        }
        st.last_event_at = Some(review.at);
        Ok(())
    }

    pub fn confirm(&self, id: &str, req: ConfirmRequest) -> Result<(ReviewOutcome, Option<JobTicket>), PipelineError> {
        let at = now_or(req.at);
        let mut st = self.state();
        let record = self.pending_item(&st, id)?;
        let review = ReviewRecord {
            prediction_id: id.to_string(),
            action: ReviewAction::Confirmed,
            operator_id: req.operator_id,
            at,
            model_version: record.model_version,
            corrections: Vec::new(),
        };
        self.resolve(&mut st, &record, &review)?;
        let (trigger, ticket, queued) = self.check_trigger(&mut st, at)?;
        let outcome = ReviewOutcome {
            prediction_id: id.to_string(),
            action: ReviewAction::Confirmed,
            corrections: Vec::new(),
            pending_corrections: st.pending().count(),
            trigger,
            job_id: ticket.as_ref().map(|t| t.job_id.clone()),
            job_queued: queued,
        };
        drop(st);
        self.emit(PipelineEvent::QueueRemoved { prediction_id: id.to_string(), action: ReviewAction::Confirmed });
        Ok((outcome, ticket))
    }

    /// Builds one correction per changed task. If none is stored the item
    /// stays pending and the per-task rejections are returned as an error.
    pub fn correct(&self, id: &str, req: CorrectRequest) -> Result<(ReviewOutcome, Option<JobTicket>), PipelineError> {
        if req.values.is_empty() {
            return Err(PipelineError::BadRequest("no corrected values".into()));
        }
        let at = now_or(req.at);
        let mut st = self.state();
        let record = self.pending_item(&st, id)?;
        let mut outcomes = Vec::new();
        for (&task, raw_value) in &req.values {
            let value = match normalize_value(task, raw_value, &self.ctx) {
                Ok(v) => v,
                Err(_) => {
                    outcomes.push(CorrectionOutcome {
                        task,
                        value: raw_value.clone(),
                        status: CorrectionStatus::Rejected(RejectReason::EmptyValue),
                        correction_id: None,
                    });
                    continue;
                }
            };
            let original = record.answers.get(&task).map(|a| a.value.clone()).unwrap_or_default();
            let cid = format!("c{:08}", st.corrections.len() + 1);
            let correction = CorrectionRecord {
                id: cid.clone(),
                image: record.image.clone(),
                task,
                original_value: original,
                corrected_value: value.clone(),
                operator_id: req.operator_id.clone(),
                created_at: at,
                status: CorrectionStatus::Accepted,
                prediction_id: Some(id.to_string()),
            };
            let status = st.corrections.ingest(correction, &self.config.quality, &self.ctx.rules)?;
            let stored = !matches!(status, CorrectionStatus::Rejected(_));
            outcomes.push(CorrectionOutcome { task, value, status, correction_id: stored.then_some(cid) });
        }
        if outcomes.iter().all(|o| matches!(o.status, CorrectionStatus::Rejected(_))) {
            return Err(PipelineError::Rejected { outcomes });
        }
        let review = ReviewRecord {
            prediction_id: id.to_string(),
            action: ReviewAction::Corrected,
            operator_id: req.operator_id,
            at,
            model_version: record.model_version,
            corrections: outcomes.clone(),
        };
        self.resolve(&mut st, &record, &review)?;
        let (trigger, ticket, queued) = self.check_trigger(&mut st, at)?;
        let outcome = ReviewOutcome {
            prediction_id: id.to_string(),
            action: ReviewAction::Corrected,
            corrections: outcomes,
            pending_corrections: st.pending().count(),
            trigger,
            job_id: ticket.as_ref().map(|t| t.job_id.clone()),
            job_queued: queued,
        };
        drop(st);
        self.emit(PipelineEvent::QueueRemoved { prediction_id: id.to_string(), action: ReviewAction::Corrected });
        Ok((outcome, ticket))
    }

    pub fn secondary_queue(&self) -> Vec<CorrectionRecord> {
        self.state().corrections.secondary_queue().cloned().collect()
    }

    pub fn corrections(&self) -> Vec<CorrectionRecord> {
        self.state().corrections.records().to_vec()
    }

    pub fn adjudicate(
        &self,
        correction_id: &str,
        req: AdjudicateRequest,
    ) -> Result<(AdjudicationOutcome, Option<JobTicket>), PipelineError> {
        let at = now_or(req.at);
        let mut st = self.state();
        let correction = st.corrections.adjudicate(correction_id, req.accept).map_err(|e| match e {
            HitlError::UnknownCorrection(id) => PipelineError::NotFound(format!("correction `{id}`")),
            HitlError::NotInSecondaryReview(id) => {
                PipelineError::Conflict(format!("correction `{id}` is not awaiting secondary review"))
            }
            other => other.into(),
        })?;
        st.last_event_at = Some(at);
        let (trigger, ticket, queued) = self.check_trigger(&mut st, at)?;
        Ok((
            AdjudicationOutcome {
                correction,
                pending_corrections: st.pending().count(),
                trigger,
                job_id: ticket.as_ref().map(|t| t.job_id.clone()),
                job_queued: queued,
            },
            ticket,
        ))
    }

    fn check_trigger(
        &self,
        st: &mut State,
        now: DateTime<Utc>,
    ) -> Result<(Option<TriggerReason>, Option<JobTicket>, bool), PipelineError> {
        let reason = match should_train(&st.trigger_state(), &self.config.trigger, now) {
            TriggerDecision::NoTrain => return Ok((None, None, false)),
            TriggerDecision::Train(r) => r,
        };
        if st.job_running {
            st.rerun = true;
            return Ok((Some(reason), None, true));
        }
        let ticket = self.start_job(st, reason, now)?;
        Ok((Some(reason), Some(ticket), false))
    }

    fn ensure_probe(&self, st: &mut State) -> Result<Arc<Vec<ProbeItem>>, PipelineError> {
        if let Some(p) = &st.probe {
            return Ok(p.clone());
        }
        let originals: Vec<&ReplayExample> = st
            .replay
            .buffer()
            .entries()
            .filter(|e| e.source == ReplaySource::Original && e.task == TaskKind::PlateRecognition)
            .collect();
        let k = self.config.probe_size.min(originals.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5052_4f42_4553_4554);
        let mut idx = rand::seq::index::sample(&mut rng, originals.len(), k).into_vec();
        idx.sort_unstable();
        let probe: Vec<ProbeItem> =
            idx.into_iter().map(|i| ProbeItem { image: originals[i].image.clone(), truth: originals[i].target.clone() }).collect();
        let path = self.config.data_dir.join("probe.json");
        store::write_atomic(&path, &serde_json::to_vec(&probe).expect("probe serializes"))
            .map_err(|e| PipelineError::Internal(format!("{}: {e}", path.display())))?;
        let probe = Arc::new(probe);
        st.probe = Some(probe.clone());
        Ok(probe)
    }

    fn start_job(&self, st: &mut State, reason: TriggerReason, at: DateTime<Utc>) -> Result<JobTicket, PipelineError> {
        let probe = self.ensure_probe(st)?;
        let corrections: Vec<CorrectionRecord> = st.pending().cloned().collect();
        let seq = st.next_job;
        let base_version = self.model.read().unwrap_or_else(|p| p.into_inner()).version;
        let job = JobRecord {
            id: format!("job-{seq:04}"),
            reason,
            status: JobStatus::Running,
            created_at: at,
            base_version,
            correction_ids: corrections.iter().map(|c| c.id.clone()).collect(),
            candidate_version: None,
            gate_report: None,
            deployed: false,
            learned_accuracy: None,
            replay_share: None,
            forgotten: None,
            batches: 0,
            manifest_digest: None,
            error: None,
        };
        self.jobs_log.append(&job)?;
        st.next_job += 1;
        st.job_running = true;
        st.in_flight.extend(job.correction_ids.iter().cloned());
        st.jobs.insert(seq, job.clone());
        log::info!("{} started ({reason:?}, {} corrections)", job.id, corrections.len());
        self.emit(PipelineEvent::JobStarted { job: job.clone() });
        Ok(JobTicket {
            job_id: job.id,
            seq,
            reason,
            at,
            base_version,
            corrections,
            replay: Arc::new(st.replay.buffer().snapshot()),
            probe,
        })
    }

    /// Executes a started job and returns the follow-up job when a trigger
    /// was queued meanwhile and still holds.
    pub fn run_job(&self, ticket: JobTicket) -> Result<Option<JobTicket>, PipelineError> {
        let result = self.execute(&ticket);
        self.finalize(ticket, result)
    }

    /// Runs `ticket` and every follow-up job it chains into.
    pub fn run_jobs(&self, ticket: Option<JobTicket>) -> Result<(), PipelineError> {
        let mut next = ticket;
        while let Some(t) = next {
            next = self.run_job(t)?;
        }
        Ok(())
    }

    fn execute(&self, t: &JobTicket) -> Result<Executed, String> {
        let err = |e: &dyn std::fmt::Display| e.to_string();
        let base = self.registry.load_script(t.base_version).map_err(|e| err(&e))?;
        let prod = self.make_backend(t.base_version, base.clone());
        let pool: Vec<TrainingExample> = t
            .corrections
            .iter()
            .map(|c| TrainingExample { digest: c.image.digest.clone(), task: c.task, target: c.corrected_value.clone() })
            .collect();
        let seed = self.config.seed ^ t.seq.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches: Vec<TrainingBatch> = (0..self.config.training_steps)
            .map(|_| compose_batch_with(t.replay.len(), pool.len(), &self.config.mix, &mut rng))
            .collect::<Result<_, _>>()
            .map_err(|e| err(&e))?;
        let manifest = {
            let mut h = Sha256::new();
            for e in pool.iter().chain(t.replay.iter()) {
                h.update(e.digest.as_str().as_bytes());
                h.update(e.task.as_str().as_bytes());
            }
            h.update(serde_json::to_vec(&batches).expect("batches serialize"));
            hex::encode(h.finalize())
        };
        let hyperparams = crate::replay::Hyperparams { seed, ..self.config.hyperparams.clone() };
        let input = TrainingInput {
            base: &base,
            corrections: &pool,
            replay: &t.replay,
            batches: &batches,
            hyperparams: &hyperparams,
        };
        let outcome = self.trainer.train(&input).map_err(|e| err(&e))?;
        let cand = self.make_backend(t.base_version, outcome.script.clone());

        let mut prod_scores = Vec::with_capacity(pool.len() + t.probe.len());
        let mut cand_scores = Vec::with_capacity(pool.len() + t.probe.len());
        for c in &t.corrections {
            let target = &c.corrected_value;
            prod_scores.push(f64::from(u8::from(answer_value(&prod, &c.image, c.task, &self.ctx) == *target)));
            cand_scores.push(f64::from(u8::from(answer_value(&cand, &c.image, c.task, &self.ctx) == *target)));
        }
        let (mut prod_hits, mut cand_hits) = (0usize, 0usize);
        for p in t.probe.iter() {
            let ph = answer_value(&prod, &p.image, TaskKind::PlateRecognition, &self.ctx) == p.truth;
            let ch = answer_value(&cand, &p.image, TaskKind::PlateRecognition, &self.ctx) == p.truth;
            prod_hits += usize::from(ph);
            cand_hits += usize::from(ch);
            prod_scores.push(f64::from(u8::from(ph)));
            cand_scores.push(f64::from(u8::from(ch)));
        }
        let n_probe = t.probe.len().max(1) as f64;
        let (prod_acc, cand_acc) = if t.probe.is_empty() {
            (1.0, 1.0)
        } else {
            (prod_hits as f64 / n_probe, cand_hits as f64 / n_probe)
        };
        let report = evaluate_gate(&prod_scores, &cand_scores, prod_acc, cand_acc, &self.config.gate).map_err(|e| err(&e))?;
        let published = self.registry.publish(&outcome.script, Some(&report), t.at).map_err(|e| err(&e))?;
        let deployed = report.decision == GateDecision::Deploy;
        if deployed {
            self.registry.activate(published.version).map_err(|e| err(&e))?;
        }
        // Re-read the serving artifact so the check covers the registry round trip.
        let serving_version = if deployed { published.version } else { t.base_version };
        let serving = self.make_backend(
            serving_version,
            if deployed { self.registry.load_script(serving_version).map_err(|e| err(&e))? } else { base },
        );
        let learned = t
            .corrections
            .iter()
            .filter(|c| answer_value(&serving, &c.image, c.task, &self.ctx) == c.corrected_value)
            .count();
        let learned_accuracy = if t.corrections.is_empty() { None } else { Some(learned as f64 / t.corrections.len() as f64) };
        Ok(Executed {
            candidate_version: published.version,
            report,
            deployed,
            learned_accuracy,
            replay_share: outcome.replay_share,
            forgotten: outcome.forgotten,
            batches: batches.len(),
            manifest,
        })
    }

    fn finalize(&self, t: JobTicket, result: Result<Executed, String>) -> Result<Option<JobTicket>, PipelineError> {
        // Swap before the finished record becomes visible, so anyone polling
        // the job sees the new model and a reset monitor.
        if matches!(&result, Ok(e) if e.deployed) {
            self.active_model()?;
        }
        let job = {
            let mut st = self.state();
            let mut job = st.jobs.get(&t.seq).cloned().ok_or_else(|| PipelineError::Internal("job vanished".into()))?;
            match result {
                Ok(e) => {
                    job.status = JobStatus::Succeeded;
                    job.candidate_version = Some(e.candidate_version);
                    job.gate_report = Some(e.report);
                    job.deployed = e.deployed;
                    job.learned_accuracy = e.learned_accuracy;
                    job.replay_share = Some(e.replay_share);
                    job.forgotten = Some(e.forgotten);
                    job.batches = e.batches;
                    job.manifest_digest = Some(e.manifest);
                }
                Err(msg) => {
                    log::warn!("{} failed: {msg}", job.id);
                    job.status = JobStatus::Failed;
                    job.error = Some(msg);
                }
            }
            self.jobs_log.append(&job)?;
            for c in &t.corrections {
                st.in_flight.remove(&c.id);
            }
            if job.status == JobStatus::Succeeded {
                st.consumed.extend(job.correction_ids.iter().cloned());
                for c in &t.corrections {
                    st.replay.push(ReplayExample {
                        image: c.image.clone(),
                        task: c.task,
                        target: c.corrected_value.clone(),
                        source: ReplaySource::Correction,
                        inserted_at: t.at,
                        seq: 0,
                    })?;
                }
            }
            st.jobs.insert(t.seq, job.clone());
            st.job_running = false;
            job
        };
        self.emit(PipelineEvent::JobFinished { job });
        let mut st = self.state();
        if st.rerun {
            st.rerun = false;
            let now = st.last_event_at.unwrap_or(t.at);
            let (_, ticket, _) = self.check_trigger(&mut st, now)?;
            return Ok(ticket);
        }
        Ok(None)
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.state().jobs.values().find(|j| j.id == id).cloned()
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        self.state().jobs.values().cloned().collect()
    }

    pub fn models(&self) -> Result<RegistryIndex, PipelineError> {
        Ok(self.registry.index()?)
    }

    pub fn rollback(&self) -> Result<RollbackOutcome, PipelineError> {
        let (current, previous) = self.registry.rollback().map_err(|e| match e {
            RegistryError::NoPreviousVersion => PipelineError::NoPreviousVersion,
            other => other.into(),
        })?;
        self.active_model()?;
        Ok(RollbackOutcome { current, previous })
    }

    /// Plate accuracy of the serving model on the frozen forgetting probe.
    pub fn probe_accuracy(&self) -> Result<Option<f64>, PipelineError> {
        let probe = match self.state().probe.clone() {
            Some(p) if !p.is_empty() => p,
            _ => return Ok(None),
        };
        let model = self.active_model()?;
        let hits = probe
            .iter()
            .filter(|p| answer_value(&model.backend, &p.image, TaskKind::PlateRecognition, &self.ctx) == p.truth)
            .count();
        Ok(Some(hits as f64 / probe.len() as f64))
    }

    /// Reviewed plate predictions paired with their operator-asserted truth.
    pub fn labeled_pairs(&self) -> Vec<EvalPair> {
        self.state().labeled.clone()
    }

    pub fn metrics(&self) -> Result<MetricsSnapshot, PipelineError> {
        let active = self.active_model()?.version;
        let previous = self.registry.previous_version()?;
        let probe_accuracy = self.probe_accuracy()?;
        let latency = self.latency.report().ok();
        let st = self.state();
        let ts = st.trigger_state();
        let (cer_v, ece_v) = if st.labeled.is_empty() {
            (None, None)
        } else {
            (cer(&st.labeled).ok(), ece(&st.labeled, self.config.ece_bins).ok().map(|(e, _)| e))
        };
        Ok(MetricsSnapshot {
            predictions: st.records.len(),
            routing: st.routing,
            routing_fractions: st.routing.fractions(),
            queue_length: st.queue.len(),
            secondary_review_length: st.corrections.secondary_queue().count(),
            rolling_accuracy: st.monitor.current(),
            baseline_accuracy: st.monitor.baseline(),
            pending_corrections: ts.pending_count,
            oldest_pending_at: ts.oldest_pending_at,
            min_corrections: self.config.trigger.min_corrections,
            max_corrections: self.config.trigger.max_corrections,
            labeled: st.labeled.len(),
            cer: cer_v,
            ece: ece_v,
            latency,
            active_version: active,
            previous_version: previous,
            jobs: st.jobs.len(),
            job_running: st.job_running,
            last_gate_report: st.jobs.values().rev().find_map(|j| j.gate_report.clone()),
            probe_size: st.probe.as_ref().map_or(0, |p| p.len()),
            probe_accuracy,
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }
}

struct Executed {
    candidate_version: u64,
    report: GateReport,
    deployed: bool,
    learned_accuracy: Option<f64>,
    replay_share: f64,
    forgotten: usize,
    batches: usize,
    manifest: String,
}

fn review_event(action: ReviewAction) -> ReviewEvent {
    match action {
        ReviewAction::Confirmed => ReviewEvent::Confirmed,
        ReviewAction::Corrected => ReviewEvent::Corrected,
    }
}

/// The plate the operator vouched for: the prediction itself on confirm, the
/// stored plate correction otherwise.
fn labeled_pair(p: &PredictionRecord, review: &ReviewRecord) -> Option<EvalPair> {
    let predicted = p.plate()?.to_string();
    let confidence = p.confidence.get(&TaskKind::PlateRecognition)?.combined;
    let truth = review
        .corrections
        .iter()
        .find(|c| c.task == TaskKind::PlateRecognition && c.correction_id.is_some())
        .map(|c| c.value.clone())
        .unwrap_or_else(|| predicted.clone());
    if truth.is_empty() {
        return None;
    }
    Some(EvalPair::new(predicted, truth, confidence))
}
