//! Experience replay: the FIFO replay buffer, correction/replay batch mixing,
//! multi-task loss weighting, LoRA parameter arithmetic and the trainer
//! interface with its deterministic mock.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{self, JsonlWriter, StoreError};
use crate::vqa::{ImageDigest, ImageRef, MockScript, ScriptKey, TaskKind};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("both the replay buffer and the correction pool are empty")]
    BothPoolsEmpty,
    #[error("no weight configured for {0}")]
    MissingWeight(TaskKind),
    #[error("loss for {task} is {value}; losses must be non-negative")]
    NegativeLoss { task: TaskKind, value: f64 },
    #[error("invalid mix config: {0}")]
    InvalidMix(String),
    #[error("invalid task weights: {0}")]
    InvalidWeights(String),
    #[error("LoRA parameter count overflows u64")]
    Overflow,
    #[error("replay store: {0}")]
    Store(#[from] StoreError),
    #[error("replay store io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaySource {
    Original,
    Correction,
}

/// One supervised (image, question, answer) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub digest: ImageDigest,
    pub task: TaskKind,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayExample {
    pub image: ImageRef,
    pub task: TaskKind,
    pub target: String,
    pub source: ReplaySource,
    pub inserted_at: DateTime<Utc>,
    /// Insertion sequence number, assigned by the buffer.
    #[serde(default)]
    pub seq: u64,
}

impl ReplayExample {
    pub fn example(&self) -> TrainingExample {
        TrainingExample { digest: self.image.digest.clone(), task: self.task, target: self.target.clone() }
    }
}

/// Fixed-capacity buffer; on overflow the oldest entry is evicted.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<ReplayExample>,
    next_seq: u64,
}

impl ReplayBuffer {
    pub const DEFAULT_CAPACITY: usize = 10_000;

    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, entries: VecDeque::new(), next_seq: 0 }
    }

    /// Appends and returns the evicted entry, if any.
    pub fn push(&mut self, mut example: ReplayExample) -> Option<ReplayExample> {
        example.seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push_back(example);
        if self.entries.len() > self.capacity {
            self.entries.pop_front()
        } else {
            None
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayExample> {
        self.entries.iter()
    }

    pub fn snapshot(&self) -> Vec<TrainingExample> {
        self.entries.iter().map(ReplayExample::example).collect()
    }
}

/// The buffer persisted as JSON lines beside a small capacity file. Only the
/// last `capacity` lines are live; the file is compacted on open when it has
/// grown past twice the capacity.
#[derive(Debug)]
pub struct ReplayStore {
    writer: JsonlWriter<ReplayExample>,
    buffer: ReplayBuffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReplayMeta {
    capacity: usize,
}

impl ReplayStore {
    pub fn open(path: impl Into<PathBuf>, capacity: usize) -> Result<Self, ReplayError> {
        let path = path.into();
        let meta_path = path.with_extension("meta.json");
        store::write_atomic(&meta_path, &serde_json::to_vec(&ReplayMeta { capacity }).expect("meta serializes"))?;
        let lines: Vec<ReplayExample> = store::recover(&path)?;
        let total = lines.len();
        let mut buffer = ReplayBuffer::new(capacity);
        let live: Vec<ReplayExample> = lines.into_iter().skip(total.saturating_sub(capacity)).collect();
        if let Some(first) = live.first() {
            buffer.next_seq = first.seq;
        }
        for e in live {
            buffer.push(e);
        }
        if total > 2 * capacity {
            let mut bytes = Vec::new();
            for e in buffer.entries() {
                bytes.extend(serde_json::to_vec(e).expect("replay entry serializes"));
                bytes.push(b'\n');
            }
            store::write_atomic(&path, &bytes)?;
        }
        let (writer, _) = JsonlWriter::open(path, false)?;
        Ok(ReplayStore { writer, buffer })
    }

    pub fn push(&mut self, example: ReplayExample) -> Result<(), ReplayError> {
        self.buffer.push(example);
        let stored = self.buffer.entries.back().expect("just pushed");
        self.writer.append(stored)?;
        Ok(())
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn path(&self) -> &Path {
        self.writer.path()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    /// Share of each batch drawn from corrections.
    pub lambda: f64,
    pub batch_size: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { lambda: 0.30, batch_size: 32 }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ReplayError::InvalidMix(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(ReplayError::InvalidMix("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// `round(lambda * batch_size)`, halves rounding up.
    pub fn correction_slots(&self) -> usize {
        ((self.lambda * self.batch_size as f64) + 0.5).floor() as usize
    }

    pub fn replay_slots(&self) -> usize {
        self.batch_size - self.correction_slots().min(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Corrections,
    Replay,
}

/// Indices into the correction pool and the replay snapshot a batch was
/// drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub corrections: Vec<usize>,
    pub replay: Vec<usize>,
    /// Set when a pool could not fill its slots and the other pool covered it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deficit: Option<Pool>,
    /// Slots left empty because both pools together were too small.
    #[serde(default)]
    pub unfilled: usize,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.corrections.len() + self.replay.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws one batch with uniform sampling without replacement in each pool.
pub fn compose_batch_with<R: Rng + ?Sized>(
    replay_len: usize,
    corrections_len: usize,
    mix: &MixConfig,
    rng: &mut R,
) -> Result<TrainingBatch, ReplayError> {
    mix.validate()?;
    if replay_len == 0 && corrections_len == 0 {
        return Err(ReplayError::BothPoolsEmpty);
    }
    let want_c = mix.correction_slots().min(mix.batch_size);
    let want_r = mix.batch_size - want_c;
    let mut take_c = want_c.min(corrections_len);
    let mut take_r = want_r.min(replay_len);
    let mut deficit = None;
    if take_c < want_c {
        deficit = Some(Pool::Corrections);
        take_r = (take_r + (want_c - take_c)).min(replay_len);
    } else if take_r < want_r {
        deficit = Some(Pool::Replay);
        take_c = (take_c + (want_r - take_r)).min(corrections_len);
    }
    let corrections = sample(rng, corrections_len, take_c).into_vec();
    let replay = sample(rng, replay_len, take_r).into_vec();
    Ok(TrainingBatch { corrections, replay, deficit, unfilled: mix.batch_size - take_c - take_r })
}

pub fn compose_batch(
    replay_len: usize,
    corrections_len: usize,
    mix: &MixConfig,
    rng_seed: u64,
) -> Result<TrainingBatch, ReplayError> {
    compose_batch_with(replay_len, corrections_len, mix, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

/// Per-task loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<TaskKind, f64>", into = "BTreeMap<TaskKind, f64>")]
pub struct TaskWeights(BTreeMap<TaskKind, f64>);

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights(BTreeMap::from([
            (TaskKind::PlateRecognition, 1.0),
            (TaskKind::StateClassification, 0.5),
            (TaskKind::MakeModel, 0.3),
            (TaskKind::ColorDescription, 0.2),
        ]))
    }
}

impl TryFrom<BTreeMap<TaskKind, f64>> for TaskWeights {
    type Error = ReplayError;

    fn try_from(map: BTreeMap<TaskKind, f64>) -> Result<Self, Self::Error> {
        if let Some((t, w)) = map.iter().find(|(_, w)| !(**w >= 0.0)) {
            return Err(ReplayError::InvalidWeights(format!("{t} has weight {w}")));
        }
        if !map.get(&TaskKind::PlateRecognition).is_some_and(|w| *w > 0.0) {
            return Err(ReplayError::InvalidWeights("plate_recognition weight must be positive".into()));
        }
        Ok(TaskWeights(map))
    }
}

impl From<TaskWeights> for BTreeMap<TaskKind, f64> {
    fn from(w: TaskWeights) -> Self {
        w.0
    }
}

impl TaskWeights {
    pub fn get(&self, task: TaskKind) -> Option<f64> {
        self.0.get(&task).copied()
    }
}

/// `sum over tasks of weight * loss`.
pub fn weighted_loss(losses: &BTreeMap<TaskKind, f64>, weights: &TaskWeights) -> Result<f64, ReplayError> {
    let mut total = 0.0;
    for (&task, &value) in losses {
        if !(value >= 0.0) {
            return Err(ReplayError::NegativeLoss { task, value });
        }
        total += weights.get(task).ok_or(ReplayError::MissingWeight(task))? * value;
    }
    Ok(total)
}

/// Trainable parameters of a LoRA adapter: `layers * modules * 2 * hidden * rank`
/// (an A and a B matrix per adapted module).
pub fn lora_param_count(layers: u64, modules_per_layer: u64, hidden_dim: u64, rank: u64) -> Result<u64, ReplayError> {
    [modules_per_layer, 2, hidden_dim, rank]
        .into_iter()
        .try_fold(layers, |acc, x| acc.checked_mul(x))
        .ok_or(ReplayError::Overflow)
}

/// Training hyperparameters. Carried for the audit trail; the mock trainer
/// only reads `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub epochs: u32,
    pub learning_rate: f64,
    pub warmup_steps: u32,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub bf16: bool,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 3,
            learning_rate: 5e-5,
            warmup_steps: 100,
            lora_rank: 16,
            lora_alpha: 32,
            bf16: true,
            seed: 0,
        }
    }
}

/// Everything a trainer sees for one update. Batches index into
/// `corrections` and `replay`.
#[derive(Debug, Clone)]
pub struct TrainingInput<'a> {
    pub base: &'a MockScript,
    pub corrections: &'a [TrainingExample],
    pub replay: &'a [TrainingExample],
    pub batches: &'a [TrainingBatch],
    pub hyperparams: &'a Hyperparams,
}

impl TrainingInput<'_> {
    /// Fraction of filled batch slots that came from the replay buffer.
    pub fn replay_share(&self) -> f64 {
        let (r, total) = self
            .batches
            .iter()
            .fold((0usize, 0usize), |(r, t), b| (r + b.replay.len(), t + b.len()));
        if total == 0 {
            0.0
        } else {
            r as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub script: MockScript,
    pub replay_share: f64,
    pub forget_probability: f64,
    pub forgotten: usize,
    pub learned: usize,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("trainer failure: {0}")]
pub struct TrainerFailure(pub String);

/// Produces a candidate model from a training input. Must not modify the
/// production artifact.
pub trait TrainerBackend: Send + Sync {
    fn train(&self, input: &TrainingInput<'_>) -> Result<TrainOutcome, TrainerFailure>;
}

/// Script-patching trainer. Every correction is learned; each pre-existing
/// entry is forgotten (dropped from the script, so the backend falls back to
/// its default answer) with probability
/// `f_max * max(0, 1 - replay_share / protect_share)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockTrainer {
    pub f_max: f64,
    pub protect_share: f64,
    pub learned_token_prob: f64,
    /// Fault injection.
    pub fail: bool,
}

impl Default for MockTrainer {
    fn default() -> Self {
        MockTrainer { f_max: 0.25, protect_share: 0.70, learned_token_prob: 0.995, fail: false }
    }
}

impl MockTrainer {
    pub fn forget_probability(&self, replay_share: f64) -> f64 {
        self.f_max * (1.0 - replay_share / self.protect_share).max(0.0)
    }
}

impl TrainerBackend for MockTrainer {
    fn train(&self, input: &TrainingInput<'_>) -> Result<TrainOutcome, TrainerFailure> {
        if self.fail {
            return Err(TrainerFailure("injected failure".into()));
        }
        let share = input.replay_share();
        let f = self.forget_probability(share);
        let mut rng = ChaCha8Rng::seed_from_u64(input.hyperparams.seed);
        let mut script = input.base.clone();
        let keys: Vec<ScriptKey> = script.keys().cloned().collect();
        let mut forgotten = 0;
        for key in keys {
            if rng.random::<f64>() < f {
                script.remove(&key);
                forgotten += 1;
            }
        }
        for c in input.corrections {
            let tokens = c.target.chars().count().max(1);
            script
                .insert(&c.digest, c.task, c.target.clone(), vec![self.learned_token_prob; tokens])
                .map_err(|e| TrainerFailure(e.to_string()))?;
        }
        Ok(TrainOutcome {
            script,
            replay_share: share,
            forget_probability: f,
            forgotten,
            learned: input.corrections.len(),
        })
    }
}
