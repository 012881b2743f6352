//! Closed-loop simulator: a synthetic fleet, a scripted operator, and a
//! report of everything the loop did.
//!
//! Traffic vehicles carry unique digests and are answered from a shared prior
//! script, so routing and error flags are fixed by the fleet alone. Training
//! images live in the bootstrap script, the replay seed and the forgetting
//! probe. A [`Driver`] abstracts how the service is reached; [`LocalDriver`]
//! calls the pipeline in-process and runs jobs inline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{RoutingDecision, RoutingThresholds};
use crate::config::{ConfigError, ServiceConfig};
use crate::gate::{GateConfig, GateDecision};
use crate::hitl::{CorrectionStatus, MonitorConfig, QualityConfig, TriggerConfig, TriggerReason};
use crate::parser::{default_rules, detect_hedging, validate_format, HedgeConfig, PlateFormatRule, ValidityLevels};
use crate::pipeline::{
    ConfirmRequest, CorrectRequest, CorrectionOutcome, JobRecord, JobStatus, MetricsSnapshot, Pipeline,
    PipelineError, PredictionRecord, RecognizeRequest, ReviewOutcome, RoutingCounts,
};
use crate::replay::{Hyperparams, MixConfig, MockTrainer, ReplayExample, ReplaySource};
use crate::store;
use crate::vqa::{ImageDigest, ImageRef, MockScript, TaskKind};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("driver: {0}")]
    Driver(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_path_buf(), source }
}

/// Plate corruption rates. Categories are exclusive: one draw per vehicle
/// picks miss, substitution, omission, addition or none, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModel {
    pub substitution_rate: f64,
    pub omission_rate: f64,
    pub addition_rate: f64,
    pub miss_rate: f64,
    /// Each pair is confusable in both directions.
    pub confusion_pairs: Vec<(char, char)>,
    pub rng_seed: u64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        ErrorModel {
            substitution_rate: 0.06,
            omission_rate: 0.02,
            addition_rate: 0.01,
            miss_rate: 0.02,
            confusion_pairs: vec![('O', '0'), ('I', '1'), ('B', '8')],
            rng_seed: 0,
        }
    }
}

impl ErrorModel {
    pub fn noiseless() -> Self {
        ErrorModel { substitution_rate: 0.0, omission_rate: 0.0, addition_rate: 0.0, miss_rate: 0.0, ..Self::default() }
    }

    pub fn total_rate(&self) -> f64 {
        self.substitution_rate + self.omission_rate + self.addition_rate + self.miss_rate
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, r) in [
            ("substitution_rate", self.substitution_rate),
            ("omission_rate", self.omission_rate),
            ("addition_rate", self.addition_rate),
            ("miss_rate", self.miss_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(SimError::InvalidScenario(format!("{name} {r} outside [0, 1]")));
            }
        }
        if self.total_rate() > 1.0 + 1e-12 {
            return Err(SimError::InvalidScenario(format!("error rates sum to {} > 1", self.total_rate())));
        }
        for &(a, b) in &self.confusion_pairs {
            if a == b || !a.is_ascii_alphanumeric() || !b.is_ascii_alphanumeric() {
                return Err(SimError::InvalidScenario(format!("bad confusion pair ({a}, {b})")));
            }
        }
        Ok(())
    }

    fn partner(&self, c: char) -> Option<char> {
        self.confusion_pairs.iter().find_map(|&(a, b)| match c {
            _ if c == a => Some(b),
            _ if c == b => Some(a),
            _ => None,
        })
    }
}

/// Generation probability is drawn from Beta(alpha, 1), CDF `x^alpha`:
/// correct answers from a high alpha, corrupted ones from a low alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceModel {
    pub correct_alpha: f64,
    pub corrupted_alpha: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel { correct_alpha: 25.0, corrupted_alpha: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorModel {
    /// Chance the operator confirms a wrong plate instead of correcting it.
    pub error_rate: f64,
    /// Also resolve auto-rejected items, not only human-review ones.
    pub review_auto_reject: bool,
}

impl Default for OperatorModel {
    fn default() -> Self {
        OperatorModel { error_rate: 0.0, review_auto_reject: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimScenario {
    pub seed: u64,
    pub n_vehicles: usize,
    /// Images known to the bootstrap model; source of the replay seed and the probe.
    pub n_training: usize,
    pub start: DateTime<Utc>,
    pub interval_secs: i64,
    /// State name to share of traffic; must sum to 1.
    pub states: BTreeMap<String, f64>,
    /// The rule named after a state generates its plates; others use the generic rule.
    pub plate_rules: Vec<PlateFormatRule>,
    pub error_model: ErrorModel,
    pub confidence: ConfidenceModel,
    pub operator: OperatorModel,
    pub quality_min: f64,
    pub quality_max: f64,
    pub routing: RoutingThresholds,
    pub trigger: TriggerConfig,
    pub monitor: MonitorConfig,
    pub mix: MixConfig,
    pub gate: GateConfig,
    pub quality: QualityConfig,
    pub trainer: MockTrainer,
    pub hyperparams: Hyperparams,
    pub probe_size: usize,
    pub training_steps: usize,
    pub replay_capacity: usize,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            seed: 7,
            n_vehicles: 10_000,
            n_training: 2_000,
            start: Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap(),
            interval_secs: 30,
            states: BTreeMap::from([
                ("California".to_string(), 0.3),
                ("Florida".to_string(), 0.1),
                ("New York".to_string(), 0.2),
                ("Texas".to_string(), 0.4),
            ]),
            plate_rules: default_rules(),
            error_model: ErrorModel::default(),
            confidence: ConfidenceModel::default(),
            operator: OperatorModel::default(),
            quality_min: 0.2,
            quality_max: 1.0,
            routing: RoutingThresholds::default(),
            trigger: TriggerConfig::default(),
            monitor: MonitorConfig::default(),
            mix: MixConfig::default(),
            gate: GateConfig::default(),
            quality: QualityConfig::default(),
            trainer: MockTrainer::default(),
            hyperparams: Hyperparams::default(),
            probe_size: 500,
            training_steps: 20,
            replay_capacity: 10_000,
        }
    }
}

impl SimScenario {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let s: SimScenario = serde_json::from_str(&text)
            .map_err(|e| SimError::InvalidScenario(format!("{}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.n_vehicles == 0 {
            return bad("n_vehicles must be positive".into());
        }
        if self.interval_secs <= 0 {
            return bad("interval_secs must be positive".into());
        }
        let total: f64 = self.states.values().sum();
        if self.states.is_empty() || self.states.values().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("state distribution must be non-negative and sum to 1 (sums to {total})"));
        }
        if !(0.0 <= self.quality_min && self.quality_min <= self.quality_max && self.quality_max <= 1.0) {
            return bad("need 0 <= quality_min <= quality_max <= 1".into());
        }
        if !(self.confidence.correct_alpha > 0.0 && self.confidence.corrupted_alpha > 0.0) {
            return bad("confidence alphas must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.operator.error_rate) {
            return bad("operator.error_rate outside [0, 1]".into());
        }
        self.error_model.validate()?;
        self.service_config(PathBuf::from(".")).validate()?;
        Ok(())
    }

    /// Plate accuracy the error model implies for fresh traffic.
    pub fn expected_accuracy(&self) -> f64 {
        1.0 - self.error_model.total_rate()
    }

    /// Service settings for this scenario, with artifact paths unset.
    pub fn service_config(&self, data_dir: PathBuf) -> ServiceConfig {
        ServiceConfig {
            data_dir,
            routing: self.routing,
            trigger: self.trigger,
            monitor: self.monitor,
            mix: self.mix,
            gate: self.gate,
            quality: self.quality,
            trainer: self.trainer.clone(),
            hyperparams: self.hyperparams.clone(),
            probe_size: self.probe_size,
            training_steps: self.training_steps,
            replay_capacity: self.replay_capacity,
            seed: self.seed,
            ..ServiceConfig::default()
        }
    }

    fn rule_for(&self, state: &str) -> PlateFormatRule {
        self.plate_rules
            .iter()
            .find(|r| r.name == state)
            .cloned()
            .unwrap_or_else(PlateFormatRule::generic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateError {
    Miss,
    Substitution,
    Omission,
    Addition,
}

pub const MISS_TEXT: &str = "I cannot determine the plate";

const MAKES: [&str; 6] = ["Toyota Camry", "Honda Civic", "Ford F-150", "Tesla Model 3", "Chevrolet Malibu", "Nissan Altima"];
const COLORS: [&str; 6] = ["White", "Black", "Silver", "Red", "Blue", "Gray"];
const ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub index: usize,
    pub image: ImageRef,
    pub at: DateTime<Utc>,
    pub truth: BTreeMap<TaskKind, String>,
    /// Text the backend answers to the plate question.
    pub plate_text: String,
    pub plate_token_probs: Vec<f64>,
    pub plate_error: Option<PlateError>,
    pub hedge_penalty: f64,
    pub format_validity: f64,
    /// The operator will confirm this plate even if it is wrong.
    pub operator_slip: bool,
}

impl Vehicle {
    pub fn generation_probability(&self) -> f64 {
        self.plate_token_probs.iter().product()
    }

    /// `(1 - penalty) * validity`; the plate is auto-accepted when the
    /// generation probability reaches `auto_accept / k`.
    pub fn confidence_scale(&self) -> f64 {
        (1.0 - self.hedge_penalty) * self.format_validity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingImage {
    pub image: ImageRef,
    pub truth: BTreeMap<TaskKind, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub training: Vec<TrainingImage>,
    pub traffic: Vec<Vehicle>,
    /// Version-1 adapter: answers every training image correctly.
    pub bootstrap: MockScript,
    /// What any version answers for traffic it never learned.
    pub prior: MockScript,
    pub replay_seed: Vec<ReplayExample>,
}

fn draw_generation_probability(rng: &mut ChaCha8Rng, alpha: f64) -> f64 {
    // Inverse CDF of Beta(alpha, 1); 1 - U keeps the draw in (0, 1].
    (1.0 - rng.random::<f64>()).powf(1.0 / alpha)
}

fn spread(g: f64, tokens: usize) -> Vec<f64> {
    let n = tokens.max(1);
    vec![g.powf(1.0 / n as f64); n]
}

fn random_plate(rng: &mut ChaCha8Rng, rule: &PlateFormatRule) -> String {
    let classes: Vec<char> = rule.pattern_string().chars().collect();
    (0..rule.min_len)
        .map(|i| {
            let pool: &[u8] = match classes[i.min(classes.len() - 1)] {
                'L' => &ALNUM[..26],
                'D' => &ALNUM[26..],
                _ => ALNUM,
            };
            pool[rng.random_range(0..pool.len())] as char
        })
        .collect()
}

fn pick_weighted<'a>(rng: &mut ChaCha8Rng, dist: &'a BTreeMap<String, f64>) -> &'a str {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (name, p) in dist {
        acc += p;
        if u < acc {
            return name;
        }
    }
    dist.keys().next_back().expect("non-empty distribution")
}

fn random_other(rng: &mut ChaCha8Rng, not: char) -> char {
    loop {
        let c = ALNUM[rng.random_range(0..ALNUM.len())] as char;
        if c != not {
            return c;
        }
    }
}

fn corrupt(rng: &mut ChaCha8Rng, model: &ErrorModel, plate: &str) -> (Option<PlateError>, String) {
    let u: f64 = rng.random();
    let mut chars: Vec<char> = plate.chars().collect();
    let m = model.miss_rate;
    let s = m + model.substitution_rate;
    let o = s + model.omission_rate;
    let a = o + model.addition_rate;
    if u < m {
        (Some(PlateError::Miss), MISS_TEXT.to_string())
    } else if u < s {
        let confusable: Vec<usize> = (0..chars.len()).filter(|&i| model.partner(chars[i]).is_some()).collect();
        if confusable.is_empty() {
            let i = rng.random_range(0..chars.len());
            chars[i] = random_other(rng, chars[i]);
        } else {
            let i = confusable[rng.random_range(0..confusable.len())];
            chars[i] = model.partner(chars[i]).expect("confusable");
        }
        (Some(PlateError::Substitution), chars.into_iter().collect())
    } else if u < o {
        chars.remove(rng.random_range(0..chars.len()));
        (Some(PlateError::Omission), chars.into_iter().collect())
    } else if u < a {
        let i = rng.random_range(0..=chars.len());
        let c = ALNUM[rng.random_range(0..ALNUM.len())] as char;
        chars.insert(i, c);
        (Some(PlateError::Addition), chars.into_iter().collect())
    } else {
        (None, plate.to_string())
    }
}

fn other_answers(rng: &mut ChaCha8Rng, state: &str) -> BTreeMap<TaskKind, String> {
    BTreeMap::from([
        (TaskKind::StateClassification, state.to_string()),
        (TaskKind::MakeModel, MAKES[rng.random_range(0..MAKES.len())].to_string()),
        (TaskKind::ColorDescription, COLORS[rng.random_range(0..COLORS.len())].to_string()),
    ])
}

fn script_answer(script: &mut MockScript, digest: &ImageDigest, task: TaskKind, text: &str, probs: Vec<f64>) {
    script.insert(digest, task, text, probs).expect("generated probabilities are in (0, 1]");
}

/// Builds the fleet. Deterministic under the scenario seed and the error
/// model seed; the error draws use their own stream so changing rates leaves
/// plates, states and image quality unchanged.
pub fn generate_fleet(s: &SimScenario) -> Result<Fleet, SimError> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut err_rng = ChaCha8Rng::seed_from_u64(s.seed ^ s.error_model.rng_seed.rotate_left(32) ^ 0xE77);
    let mut op_rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x0_9E7A_7012);
    let hedges = HedgeConfig::default();
    let levels = ValidityLevels::default();

    let mut bootstrap = MockScript::default();
    let mut replay_seed = Vec::with_capacity(s.n_training * 4);
    let mut training = Vec::with_capacity(s.n_training);
    let seeded_at = s.start - Duration::days(1);
    for i in 0..s.n_training {
        let state = pick_weighted(&mut rng, &s.states).to_string();
        let plate = random_plate(&mut rng, &s.rule_for(&state));
        let quality = rng.random_range(s.quality_min..=s.quality_max);
        let digest = ImageDigest::of_bytes(format!("{}:train:{i}", s.seed).as_bytes());
        let image = ImageRef::new(format!("train-{i:05}"), digest.clone(), 1920, 1080, quality)
            .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        let mut truth = other_answers(&mut rng, &state);
        truth.insert(TaskKind::PlateRecognition, plate);
        for (&task, value) in &truth {
            let tokens = match task {
                TaskKind::PlateRecognition => value.chars().count(),
                _ => value.split_whitespace().count(),
            };
            script_answer(&mut bootstrap, &digest, task, value, spread(0.99, tokens));
            replay_seed.push(ReplayExample {
                image: image.clone(),
                task,
                target: value.clone(),
                source: ReplaySource::Original,
                inserted_at: seeded_at,
                seq: 0,
            });
        }
        training.push(TrainingImage { image, truth });
    }

    let mut prior = MockScript::default();
    let mut traffic = Vec::with_capacity(s.n_vehicles);
    for i in 0..s.n_vehicles {
        let state = pick_weighted(&mut rng, &s.states).to_string();
        let plate = random_plate(&mut rng, &s.rule_for(&state));
        let quality = rng.random_range(s.quality_min..=s.quality_max);
        let others = other_answers(&mut rng, &state);
        let correct_g = draw_generation_probability(&mut rng, s.confidence.correct_alpha);
        let corrupted_g = draw_generation_probability(&mut rng, s.confidence.corrupted_alpha);
        let (plate_error, plate_text) = corrupt(&mut err_rng, &s.error_model, &plate);
        let operator_slip = op_rng.random::<f64>() < s.operator.error_rate;

        let digest = ImageDigest::of_bytes(format!("{}:traffic:{i}", s.seed).as_bytes());
        let image = ImageRef::new(format!("veh-{i:05}"), digest.clone(), 1920, 1080, quality)
            .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        let g = if plate_error.is_some() { corrupted_g } else { correct_g };
        let tokens = if plate_error == Some(PlateError::Miss) { 1 } else { plate_text.chars().count() };
        let plate_token_probs = spread(g, tokens);
        let (_, hedge_penalty) = detect_hedging(&plate_text, &hedges);
        let format_validity = if plate_error == Some(PlateError::Miss) {
            levels.malformed
        } else {
            validate_format(&plate_text, &s.plate_rules, &levels)
        };
        script_answer(&mut prior, &digest, TaskKind::PlateRecognition, &plate_text, plate_token_probs.clone());
        for (&task, value) in &others {
            script_answer(&mut prior, &digest, task, value, spread(0.99, value.split_whitespace().count()));
        }
        let mut truth = others;
        truth.insert(TaskKind::PlateRecognition, plate);
        traffic.push(Vehicle {
            index: i,
            image,
            at: s.start + Duration::seconds(s.interval_secs * i as i64),
            truth,
            plate_text,
            plate_token_probs,
            plate_error,
            hedge_penalty,
            format_validity,
            operator_slip,
        });
    }
    Ok(Fleet { training, traffic, bootstrap, prior, replay_seed })
}

/// Writes the scripts and replay seed under `dir/scenario` and returns the
/// service configuration that uses them, with state under `dir/state`.
pub fn prepare(s: &SimScenario, fleet: &Fleet, dir: &Path) -> Result<ServiceConfig, SimError> {
    let art = dir.join("scenario");
    std::fs::create_dir_all(&art).map_err(io_err(&art))?;
    let write = |name: &str, bytes: Vec<u8>| -> Result<PathBuf, SimError> {
        let p = art.join(name);
        store::write_atomic(&p, &bytes).map_err(io_err(&p))?;
        Ok(p)
    };
    let bootstrap = write("bootstrap.json", serde_json::to_vec(&fleet.bootstrap).expect("script serializes"))?;
    let prior = write("prior.json", serde_json::to_vec(&fleet.prior).expect("script serializes"))?;
    let mut lines = Vec::new();
    for e in &fleet.replay_seed {
        serde_json::to_writer(&mut lines, e).expect("example serializes");
        lines.push(b'\n');
    }
    let replay_seed = write("replay_seed.jsonl", lines)?;
    let mut config = s.service_config(dir.join("state"));
    config.bootstrap_script = Some(bootstrap);
    config.prior_script = Some(prior);
    config.replay_seed = Some(replay_seed);
    write("service.json", serde_json::to_vec_pretty(&config).expect("config serializes"))?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorrectResponse {
    Reviewed(ReviewOutcome),
    /// Every correction was rejected; the item stays pending.
    Rejected(Vec<CorrectionOutcome>),
}

/// How the simulator reaches the service.
pub trait Driver {
    fn recognize(&mut self, req: &RecognizeRequest) -> Result<PredictionRecord, SimError>;
    fn confirm(&mut self, id: &str, req: &ConfirmRequest) -> Result<ReviewOutcome, SimError>;
    fn correct(&mut self, id: &str, req: &CorrectRequest) -> Result<CorrectResponse, SimError>;
    /// Blocks until the job has finished.
    fn wait_job(&mut self, id: &str) -> Result<JobRecord, SimError>;
    fn metrics(&mut self) -> Result<MetricsSnapshot, SimError>;
}

/// In-process driver; jobs run inline on the calling thread.
#[derive(Debug)]
pub struct LocalDriver {
    pipeline: Pipeline,
}

impl LocalDriver {
    pub fn new(pipeline: Pipeline) -> Self {
        LocalDriver { pipeline }
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }
}

impl Driver for LocalDriver {
    fn recognize(&mut self, req: &RecognizeRequest) -> Result<PredictionRecord, SimError> {
        Ok(self.pipeline.recognize(req.clone())?)
    }

    fn confirm(&mut self, id: &str, req: &ConfirmRequest) -> Result<ReviewOutcome, SimError> {
        let (outcome, ticket) = self.pipeline.confirm(id, req.clone())?;
        self.pipeline.run_jobs(ticket)?;
        Ok(outcome)
    }

    fn correct(&mut self, id: &str, req: &CorrectRequest) -> Result<CorrectResponse, SimError> {
        match self.pipeline.correct(id, req.clone()) {
            Ok((outcome, ticket)) => {
                self.pipeline.run_jobs(ticket)?;
                Ok(CorrectResponse::Reviewed(outcome))
            }
            Err(PipelineError::Rejected { outcomes }) => Ok(CorrectResponse::Rejected(outcomes)),
            Err(e) => Err(e.into()),
        }
    }

    fn wait_job(&mut self, id: &str) -> Result<JobRecord, SimError> {
        self.pipeline.job(id).ok_or_else(|| SimError::Driver(format!("unknown job {id}")))
    }

    fn metrics(&mut self) -> Result<MetricsSnapshot, SimError> {
        Ok(self.pipeline.metrics()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandMass {
    pub expected: f64,
    pub sigma: f64,
    pub observed: usize,
}

impl BandMass {
    pub fn within(&self, sigmas: f64) -> bool {
        (self.observed as f64 - self.expected).abs() <= sigmas * self.sigma + 1e-9
    }
}

/// Expected routing counts from the generating distribution: a vehicle with
/// scale `k` is auto-accepted when `g >= aa / k`, which under CDF `x^alpha`
/// has mass `1 - (aa / k)^alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRouting {
    pub bands: BTreeMap<RoutingDecision, BandMass>,
    pub within_3_sigma: bool,
}

pub fn analytic_routing(s: &SimScenario, fleet: &Fleet, observed: &RoutingCounts) -> AnalyticRouting {
    let cdf = |x: f64, alpha: f64| if x <= 0.0 { 0.0 } else if x >= 1.0 { 1.0 } else { x.powf(alpha) };
    let (aa, rl) = (s.routing.auto_accept(), s.routing.review_low());
    let mut mass = [(0.0, 0.0); 3];
    for v in &fleet.traffic {
        let alpha =
            if v.plate_error.is_some() { s.confidence.corrupted_alpha } else { s.confidence.correct_alpha };
        let k = v.confidence_scale();
        let (below_aa, below_rl) = if k <= 0.0 { (1.0, 1.0) } else { (cdf(aa / k, alpha), cdf(rl / k, alpha)) };
        for (i, p) in [1.0 - below_aa, below_aa - below_rl, below_rl].into_iter().enumerate() {
            mass[i].0 += p;
            mass[i].1 += p * (1.0 - p);
        }
    }
    let counts = [observed.auto_accept, observed.human_review, observed.auto_reject];
    let decisions = [RoutingDecision::AutoAccept, RoutingDecision::HumanReview, RoutingDecision::AutoReject];
    let bands: BTreeMap<_, _> = decisions
        .into_iter()
        .zip(mass.iter().zip(counts))
        .map(|(d, (&(e, var), n))| (d, BandMass { expected: e, sigma: var.sqrt(), observed: n }))
        .collect();
    let within_3_sigma = bands.values().all(|b| b.within(3.0));
    AnalyticRouting { bands, within_3_sigma }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub vehicle_index: usize,
    pub reason: TriggerReason,
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: String,
    pub vehicle_index: usize,
    pub reason: TriggerReason,
    pub status: JobStatus,
    pub corrections: usize,
    pub decision: Option<GateDecision>,
    pub p_value: Option<f64>,
    pub mean_delta: Option<f64>,
    pub forgetting_drop: Option<f64>,
    /// Probe accuracy of production and of the candidate.
    pub probe_before: Option<f64>,
    pub probe_after: Option<f64>,
    pub deployed: bool,
    pub candidate_version: Option<u64>,
    pub learned_accuracy: Option<f64>,
    pub replay_share: Option<f64>,
    pub forgotten: Option<usize>,
}

impl JobSummary {
    fn from_record(job: &JobRecord, vehicle_index: usize) -> Self {
        let g = job.gate_report.as_ref();
        JobSummary {
            job_id: job.id.clone(),
            vehicle_index,
            reason: job.reason,
            status: job.status,
            corrections: job.correction_ids.len(),
            decision: g.map(|g| g.decision),
            p_value: g.map(|g| g.p_value),
            mean_delta: g.map(|g| g.mean_delta),
            forgetting_drop: g.map(|g| g.forgetting_drop),
            probe_before: g.map(|g| g.prod_heldout_acc),
            probe_after: g.map(|g| g.cand_heldout_acc),
            deployed: job.deployed,
            candidate_version: job.candidate_version,
            learned_accuracy: job.learned_accuracy,
            replay_share: job.replay_share,
            forgotten: job.forgotten,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Swap {
    pub vehicle_index: usize,
    pub from: u64,
    pub to: u64,
}

/// Traffic served by one model version between swaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub version: u64,
    pub first_vehicle: usize,
    pub vehicles: usize,
    pub plate_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub initial: Option<f64>,
    pub last: Option<f64>,
    pub max_job_drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub n_vehicles: usize,
    pub routing: RoutingCounts,
    pub routing_fractions: BTreeMap<RoutingDecision, f64>,
    pub analytic_routing: AnalyticRouting,
    pub expected_plate_accuracy: f64,
    pub plate_accuracy: f64,
    pub reviews: usize,
    pub confirmations: usize,
    pub corrected_reviews: usize,
    pub corrections_accepted: usize,
    pub corrections_secondary: usize,
    pub rejections: BTreeMap<String, usize>,
    pub left_pending: usize,
    pub triggers: Vec<TriggerEvent>,
    pub jobs: Vec<JobSummary>,
    pub swaps: Vec<Swap>,
    pub segments: Vec<Segment>,
    pub probe: ProbeSummary,
    /// Share of corrections the serving model answers correctly right after
    /// the deploying job, pooled over deployed jobs.
    pub post_retrain_accuracy: Option<f64>,
    pub final_metrics: MetricsSnapshot,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct SegmentAcc {
    version: u64,
    first: usize,
    n: usize,
    hits: usize,
}

/// Plays every traffic vehicle through `driver` with a perfect (up to the
/// slip knob) operator resolving each queued item right away. A fired
/// trigger is waited on before the next vehicle, so the run is deterministic
/// whichever driver is used.
pub fn run_cycle(s: &SimScenario, fleet: &Fleet, driver: &mut dyn Driver) -> Result<SimReport, SimError> {
    let mut routing = RoutingCounts::default();
    let mut plate_hits = 0usize;
    let mut reviews = 0;
    let mut confirmations = 0;
    let mut corrected_reviews = 0;
    let mut corrections_accepted = 0;
    let mut corrections_secondary = 0;
    let mut rejections: BTreeMap<String, usize> = BTreeMap::new();
    let mut triggers = Vec::new();
    let mut jobs = Vec::new();
    let mut swaps = Vec::new();
    let mut segments: Vec<SegmentAcc> = Vec::new();

    for v in &fleet.traffic {
        let record = driver.recognize(&RecognizeRequest { image: v.image.clone(), tasks: None, at: Some(v.at) })?;
        let truth_plate = &v.truth[&TaskKind::PlateRecognition];
        let plate_ok = record.plate() == Some(truth_plate.as_str());
        plate_hits += usize::from(plate_ok);
        match segments.last_mut() {
            Some(seg) if seg.version == record.model_version => {
                seg.n += 1;
                seg.hits += usize::from(plate_ok);
            }
            last => {
                if let Some(prev) = last {
                    swaps.push(Swap { vehicle_index: v.index, from: prev.version, to: record.model_version });
                }
                segments.push(SegmentAcc {
                    version: record.model_version,
                    first: v.index,
                    n: 1,
                    hits: usize::from(plate_ok),
                });
            }
        }
        match record.routing {
            RoutingDecision::AutoAccept => {
                routing.auto_accept += 1;
                continue;
            }
            RoutingDecision::HumanReview => routing.human_review += 1,
            RoutingDecision::AutoReject => {
                routing.auto_reject += 1;
                if !s.operator.review_auto_reject {
                    continue;
                }
            }
        }

        let mut values = BTreeMap::new();
        if !plate_ok && !v.operator_slip {
            values.insert(TaskKind::PlateRecognition, truth_plate.clone());
        }
        let state = TaskKind::StateClassification;
        let predicted = record.answers.get(&state).map(|a| a.value.as_str());
        if predicted.is_some_and(|p| p != v.truth[&state]) {
            values.insert(state, v.truth[&state].clone());
        }
        let outcome = if values.is_empty() {
            let o = driver.confirm(&record.id, &ConfirmRequest { operator_id: "sim".into(), at: Some(v.at) })?;
            confirmations += 1;
            o
        } else {
            let req = CorrectRequest { values, operator_id: "sim".into(), at: Some(v.at) };
            match driver.correct(&record.id, &req)? {
                CorrectResponse::Reviewed(o) => {
                    corrected_reviews += 1;
                    o
                }
                CorrectResponse::Rejected(outcomes) => {
                    for o in outcomes {
                        if let CorrectionStatus::Rejected(r) = o.status {
                            *rejections.entry(r.as_str().to_string()).or_default() += 1;
                        }
                    }
                    continue;
                }
            }
        };
        reviews += 1;
        for c in &outcome.corrections {
            match c.status {
                CorrectionStatus::Accepted => corrections_accepted += 1,
                CorrectionStatus::SecondaryReview => corrections_secondary += 1,
                CorrectionStatus::Rejected(r) => *rejections.entry(r.as_str().to_string()).or_default() += 1,
            }
        }
        if let (Some(reason), Some(job_id)) = (outcome.trigger, outcome.job_id.clone()) {
            triggers.push(TriggerEvent { vehicle_index: v.index, reason, job_id: job_id.clone() });
            let job = driver.wait_job(&job_id)?;
            log::debug!("vehicle {}: {} {:?} deployed={}", v.index, job.id, job.status, job.deployed);
            jobs.push(JobSummary::from_record(&job, v.index));
        }
    }

    let final_metrics = driver.metrics()?;
    let deployed: Vec<&JobSummary> = jobs.iter().filter(|j| j.deployed).collect();
    let (learned, total) = deployed.iter().fold((0.0, 0usize), |(l, t), j| {
        (l + j.learned_accuracy.unwrap_or(0.0) * j.corrections as f64, t + j.corrections)
    });
    let n = fleet.traffic.len();
    let analytic = analytic_routing(s, fleet, &routing);
    Ok(SimReport {
        seed: s.seed,
        n_vehicles: n,
        routing,
        routing_fractions: routing.fractions(),
        analytic_routing: analytic,
        expected_plate_accuracy: s.expected_accuracy(),
        plate_accuracy: plate_hits as f64 / n as f64,
        reviews,
        confirmations,
        corrected_reviews,
        corrections_accepted,
        corrections_secondary,
        rejections,
        left_pending: final_metrics.queue_length,
        triggers,
        swaps,
        segments: segments
            .iter()
            .map(|g| Segment {
                version: g.version,
                first_vehicle: g.first,
                vehicles: g.n,
                plate_accuracy: g.hits as f64 / g.n as f64,
            })
            .collect(),
        probe: ProbeSummary {
            initial: jobs.iter().find_map(|j| j.probe_before),
            last: final_metrics.probe_accuracy,
            max_job_drop: jobs.iter().filter_map(|j| j.forgetting_drop).reduce(f64::max),
        },
        post_retrain_accuracy: (total > 0).then(|| learned / total as f64),
        jobs,
        final_metrics,
    })
}

/// Generates the fleet, prepares `dir` and runs the loop in-process.
pub fn simulate(s: &SimScenario, dir: &Path) -> Result<SimReport, SimError> {
    let fleet = generate_fleet(s)?;
    let config = prepare(s, &fleet, dir)?;
    let mut driver = LocalDriver::new(Pipeline::open(config)?);
    run_cycle(s, &fleet, &mut driver)
}
