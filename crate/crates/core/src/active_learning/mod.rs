//! Pool-based active learning: score the unlabeled pool, issue a query
//! batch, accept labels, fine-tune, validate, repeat until a terminal state.

mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{fine_tune, Model, TrainConfig};
use crate::dataset::{init_pools, DatasetManifest, Label, LabelSource, PoolState, Sample, Split};
use crate::error::{Error, Result};

pub use store::{
    load_history_csv, resume_session, save_session, session_model, CheckpointRetention,
    SESSION_FORMAT_VERSION,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Uncertainty,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertainty" => Ok(Strategy::Uncertainty),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneScope {
    /// Every label collected so far.
    #[default]
    Cumulative,
    /// Only the batch that just arrived.
    BatchOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Equal scores resolve to the lexicographically smaller id.
    #[default]
    Lexicographic,
    /// Equal scores resolve by a shuffle seeded from the session seed.
    Seeded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampMode {
    #[default]
    Wall,
    /// Unix epoch plus one second per iteration, so persisted files are
    /// byte-reproducible.
    Logical,
}

/// Plateau rule: fires once the last `window` validation accuracies span at
/// most `epsilon` (max minus min).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub window: usize,
    pub epsilon: f64,
}

impl StopRule {
    pub fn fires(&self, history: &[HistoryRow]) -> bool {
        if self.window == 0 || history.len() < self.window {
            return false;
        }
        let tail = &history[history.len() - self.window..];
        let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.val_accuracy), hi.max(r.val_accuracy))
        });
        hi - lo <= self.epsilon
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ALConfig {
    pub query_size: usize,
    pub max_queries: usize,
    #[serde(default)]
    pub strategy: Strategy,
    pub fine_tune_epochs: usize,
    #[serde(default)]
    pub fine_tune_scope: FineTuneScope,
    #[serde(default)]
    pub stop_rule: Option<StopRule>,
    pub train_cfg: TrainConfig,
    #[serde(default)]
    pub rng_seed: u64,
    /// Ids labeled from ground truth before the first query.
    #[serde(default)]
    pub seed_size: usize,
    #[serde(default)]
    pub tie_break: TieBreak,
    #[serde(default)]
    pub timestamps: TimestampMode,
    #[serde(default)]
    pub retention: CheckpointRetention,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            query_size: 50,
            max_queries: 40,
            strategy: Strategy::Uncertainty,
            fine_tune_epochs: 5,
            fine_tune_scope: FineTuneScope::Cumulative,
            stop_rule: None,
            train_cfg: TrainConfig::default(),
            rng_seed: 0,
            seed_size: 0,
            tie_break: TieBreak::Lexicographic,
            timestamps: TimestampMode::Wall,
            retention: CheckpointRetention::All,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_size == 0 || self.max_queries == 0 || self.fine_tune_epochs == 0 {
            return Err(Error::Range(
                "query_size, max_queries and fine_tune_epochs must be positive".into(),
            ));
        }
        if let Some(rule) = &self.stop_rule {
            if rule.window == 0 || !(rule.epsilon >= 0.0) {
                return Err(Error::Range("stop rule needs window >= 1 and epsilon >= 0".into()));
            }
        }
        self.train_cfg.validate()
    }

    fn fine_tune_cfg(&self, iteration: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.fine_tune_epochs,
            rng_seed: mix(self.train_cfg.rng_seed, iteration as u64),
            ..self.train_cfg.clone()
        }
    }
}

/// Per-iteration seed derivation, stable across save and resume.
fn mix(seed: u64, iteration: u64) -> u64 {
    seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub iteration: usize,
    /// Most informative first.
    pub sample_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub issued_at: DateTime<Utc>,
    /// Fewer ids than requested because the pool ran short.
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingLabels,
    Training,
    ConvergedStopped,
    Exhausted,
    Aborted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            SessionStatus::ConvergedStopped | SessionStatus::Exhausted | SessionStatus::Aborted
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::AwaitingLabels => "awaiting_labels",
            SessionStatus::Training => "training",
            SessionStatus::ConvergedStopped => "converged_stopped",
            SessionStatus::Exhausted => "exhausted",
            SessionStatus::Aborted => "aborted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub val_accuracy: f64,
    pub labeled_count: usize,
    pub timestamp: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ALSessionState {
    pub session_id: String,
    pub config: ALConfig,
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    pub pool: PoolState,
    /// Relative to the session directory once saved.
    #[serde(default)]
    pub model_checkpoint_ref: Option<PathBuf>,
    pub pending_batch: Option<QueryBatch>,
    pub history: Vec<HistoryRow>,
    pub status: SessionStatus,
    /// Number of batches issued so far.
    pub iteration: usize,
    /// Ids of the most recently labeled batch, for batch-only fine-tuning.
    #[serde(default)]
    pub last_batch: Vec<String>,
    #[serde(default)]
    pub stop_requested: bool,
    #[serde(default)]
    pub abort_cause: Option<String>,
}

impl ALSessionState {
    /// A fresh session: seed labels applied, nothing issued yet. The first
    /// `step` issues batch 1 from the initial model's scores.
    pub fn new(session_id: impl Into<String>, config: ALConfig, manifest: &DatasetManifest) -> Result<Self> {
        config.validate()?;
        let pool = init_pools(manifest, config.seed_size, config.rng_seed)?;
        if pool.unlabeled_count() == 0 {
            return Err(Error::PoolExhausted);
        }
        Ok(ALSessionState {
            session_id: session_id.into(),
            config,
            manifest_path: None,
            pool,
            model_checkpoint_ref: None,
            pending_batch: None,
            history: Vec::new(),
            status: SessionStatus::Training,
            iteration: 0,
            last_batch: Vec::new(),
            stop_requested: false,
            abort_cause: None,
        })
    }

    pub fn is_fresh(&self) -> bool {
        self.iteration == 0 && self.status == SessionStatus::Training
    }

    pub fn latest_val_accuracy(&self) -> Option<f64> {
        self.history.last().map(|r| r.val_accuracy)
    }

    /// Every id issued in a batch so far (labeled ones plus the pending batch),
    /// excluding seed labels.
    pub fn queried_ids(&self) -> BTreeSet<&str> {
        let seeds = self.config.seed_size;
        self.pool
            .labeled_ids()
            .skip(seeds)
            .chain(self.pending_batch.iter().flat_map(|b| b.sample_ids.iter().map(String::as_str)))
            .collect()
    }

    fn now(&self) -> DateTime<Utc> {
        match self.config.timestamps {
            TimestampMode::Wall => Utc::now(),
            TimestampMode::Logical => Utc
                .timestamp_opt(self.iteration as i64, 0)
                .single()
                .expect("small offsets are valid"),
        }
    }

    /// Labeled training samples with the pool's labels applied.
    fn labeled_samples(&self, manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<Sample>> {
        let mut samples = manifest.resolve(ids)?;
        for s in &mut samples {
            let entry = &self.pool.labeled()[&s.id];
            s.assigned_label = Some(entry.label);
            s.label_source = Some(entry.source.clone());
        }
        Ok(samples)
    }
}

/// Margin from 0.5: 0.5 at p = 0.5, 0 at p in {0, 1}. For one sigmoid
/// output, least-confidence, margin and entropy give the same ordering.
pub fn uncertainty_scores(probs: &[f64]) -> Result<Vec<f64>> {
    probs
        .iter()
        .map(|&p| {
            if (0.0..=1.0).contains(&p) {
                Ok(0.5 - (p - 0.5).abs())
            } else {
                Err(Error::Range(format!("probability {p} not in [0, 1]")))
            }
        })
        .collect()
}

/// Picks up to `k` unlabeled ids. Scores are reported for every selected id
/// (0 where `scores_by_id` has none, which only the random strategy allows).
pub fn select_query(
    pool: &PoolState,
    scores_by_id: &HashMap<String, f64>,
    k: usize,
    strategy: Strategy,
    rng_seed: u64,
) -> Result<QueryBatch> {
    select_with_ties(pool, scores_by_id, k, strategy, TieBreak::Lexicographic, rng_seed)
}

fn select_with_ties(
    pool: &PoolState,
    scores_by_id: &HashMap<String, f64>,
    k: usize,
    strategy: Strategy,
    tie_break: TieBreak,
    rng_seed: u64,
) -> Result<QueryBatch> {
    if k == 0 {
        return Err(Error::Range("query size must be at least 1".into()));
    }
    if pool.unlabeled_count() == 0 {
        return Err(Error::PoolExhausted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut candidates: Vec<&String> = pool.unlabeled_ids().iter().collect();
    candidates.sort();
    let take = k.min(candidates.len());
    let chosen: Vec<&String> = match strategy {
        Strategy::Random => {
            let picked = rand::seq::index::sample(&mut rng, candidates.len(), take);
            picked.iter().map(|i| candidates[i]).collect()
        }
        Strategy::Uncertainty => {
            let mut scored = candidates
                .iter()
                .map(|id| {
                    scores_by_id
                        .get(*id)
                        .map(|&s| (*id, s))
                        .ok_or_else(|| Error::Shape(format!("no score for unlabeled sample `{id}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if tie_break == TieBreak::Seeded {
                scored.shuffle(&mut rng);
            }
            // Stable sort keeps the lexicographic (or shuffled) order among ties.
            scored.sort_by(|a, b| b.1.total_cmp(&a.1));
            scored.into_iter().take(take).map(|(id, _)| id).collect()
        }
    };
    Ok(QueryBatch {
        iteration: 0,
        scores: chosen
            .iter()
            .map(|id| scores_by_id.get(*id).copied().unwrap_or(0.0))
            .collect(),
        sample_ids: chosen.into_iter().cloned().collect(),
        issued_at: Utc::now(),
        truncated: take < k,
    })
}

/// Applies a full batch of labels atomically. The pending batch must be
/// covered exactly.
pub fn submit_labels(
    session: &mut ALSessionState,
    labels: &BTreeMap<String, Label>,
    source: LabelSource,
) -> Result<()> {
    let batch = match (&session.status, &session.pending_batch) {
        (SessionStatus::AwaitingLabels, Some(batch)) => batch,
        (status, _) => {
            return Err(Error::Conflict(format!(
                "session `{}` is {} and has no pending batch",
                session.session_id,
                status.as_str()
            )))
        }
    };
    let expected: BTreeSet<&str> = batch.sample_ids.iter().map(String::as_str).collect();
    let missing: Vec<String> = expected
        .iter()
        .filter(|id| !labels.contains_key(**id))
        .map(|id| id.to_string())
        .collect();
    let unexpected: Vec<String> = labels
        .keys()
        .filter(|id| !expected.contains(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::BatchMismatch { missing, unexpected });
    }
    let ordered: Vec<(String, Label)> = batch
        .sample_ids
        .iter()
        .map(|id| (id.clone(), labels[id]))
        .collect();
    session.pool.label_batch(&ordered, &source)?;
    session.last_batch = batch.sample_ids.clone();
    session.pending_batch = None;
    session.status = SessionStatus::Training;
    Ok(())
}

/// Human stop decision. While awaiting labels the pending batch is voided
/// and its ids stay in the pool; while training the stop takes effect when
/// the current iteration completes.
pub fn request_stop(session: &mut ALSessionState) -> Result<()> {
    match session.status {
        s if s.is_terminal() => Err(Error::Conflict(format!(
            "session `{}` is already {}",
            session.session_id,
            s.as_str()
        ))),
        SessionStatus::AwaitingLabels => {
            session.pending_batch = None;
            session.status = SessionStatus::ConvergedStopped;
            Ok(())
        }
        _ if session.stop_requested => Err(Error::Conflict(format!(
            "stop already requested for session `{}`",
            session.session_id
        ))),
        _ => {
            session.stop_requested = true;
            Ok(())
        }
    }
}

/// One engine transition from `training`: fine-tune on the new labels (not
/// on a fresh session without seeds), validate, record history, then either
/// finish or issue the next batch.
pub fn step(
    session: &mut ALSessionState,
    model: Model,
    manifest: &DatasetManifest,
    val_samples: &[Sample],
) -> Result<Model> {
    if session.status != SessionStatus::Training {
        return Err(Error::Conflict(format!(
            "step needs status training, session `{}` is {}",
            session.session_id,
            session.status.as_str()
        )));
    }
    match advance(session, model, manifest, val_samples) {
        Ok(model) => Ok(model),
        Err(e) => {
            session.status = SessionStatus::Aborted;
            session.abort_cause = Some(format!("{}: {e}", e.code()));
            session.pending_batch = None;
            Err(e)
        }
    }
}

fn advance(
    session: &mut ALSessionState,
    mut model: Model,
    manifest: &DatasetManifest,
    val_samples: &[Sample],
) -> Result<Model> {
    let cfg = session.config.clone();
    if session.iteration == 0 {
        if session.pool.labeled_count() > 0 {
            let ids: Vec<String> = session.pool.labeled_ids().map(String::from).collect();
            let seeds = session.labeled_samples(manifest, &ids)?;
            model = fine_tune(model, &seeds, &cfg.fine_tune_cfg(0))?;
        }
    } else {
        let ids: Vec<String> = match cfg.fine_tune_scope {
            FineTuneScope::Cumulative => session.pool.labeled_ids().map(String::from).collect(),
            FineTuneScope::BatchOnly => session.last_batch.clone(),
        };
        let labeled = session.labeled_samples(manifest, &ids)?;
        model = fine_tune(model, &labeled, &cfg.fine_tune_cfg(session.iteration))?;
        let val_accuracy = validation_accuracy(&model, val_samples)?;
        let row = HistoryRow {
            iteration: session.iteration,
            val_accuracy,
            labeled_count: session.pool.labeled_count(),
            timestamp: session.now(),
        };
        tracing::info!(
            session = %session.session_id,
            iteration = row.iteration,
            val_accuracy,
            labeled = row.labeled_count,
            "iteration complete"
        );
        session.history.push(row);

        let terminal = if session.stop_requested
            || cfg.stop_rule.is_some_and(|r| r.fires(&session.history))
        {
            Some(SessionStatus::ConvergedStopped)
        } else if session.pool.unlabeled_count() == 0 || session.iteration >= cfg.max_queries {
            Some(SessionStatus::Exhausted)
        } else {
            None
        };
        if let Some(status) = terminal {
            session.status = status;
            return Ok(model);
        }
    }
    if session.stop_requested {
        session.status = SessionStatus::ConvergedStopped;
        return Ok(model);
    }
    issue_batch(session, &model, manifest)?;
    Ok(model)
}

fn validation_accuracy(model: &Model, val_samples: &[Sample]) -> Result<f64> {
    if val_samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let truth: Vec<Label> = val_samples
        .iter()
        .map(|s| s.training_label().ok_or_else(|| Error::MissingLabel(s.id.clone())))
        .collect::<Result<_>>()?;
    let preds = model.predict_label(val_samples, 0.5)?;
    let correct = preds.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

fn issue_batch(session: &mut ALSessionState, model: &Model, manifest: &DatasetManifest) -> Result<()> {
    let ids: Vec<String> = session.pool.unlabeled_ids().iter().cloned().collect();
    let samples = manifest.resolve(&ids)?;
    let probs = model.predict_proba(&samples)?;
    let scores = uncertainty_scores(&probs)?;
    let by_id: HashMap<String, f64> = ids.into_iter().zip(scores).collect();
    let iteration = session.iteration + 1;
    let cfg = &session.config;
    let mut batch = select_with_ties(
        &session.pool,
        &by_id,
        cfg.query_size,
        cfg.strategy,
        cfg.tie_break,
        mix(cfg.rng_seed, iteration as u64),
    )?;
    session.iteration = iteration;
    batch.iteration = iteration;
    batch.issued_at = session.now();
    session.pending_batch = Some(batch);
    session.status = SessionStatus::AwaitingLabels;
    Ok(())
}

/// Something that answers label queries.
pub trait Annotator {
    fn label(&mut self, sample_ids: &[String]) -> Result<Vec<Label>>;
    fn source(&self) -> LabelSource;
}

/// Answers from stored ground truth.
pub struct OracleAnnotator<'a> {
    manifest: &'a DatasetManifest,
}

impl<'a> OracleAnnotator<'a> {
    pub fn new(manifest: &'a DatasetManifest) -> Self {
        OracleAnnotator { manifest }
    }
}

impl Annotator for OracleAnnotator<'_> {
    fn label(&mut self, sample_ids: &[String]) -> Result<Vec<Label>> {
        sample_ids
            .iter()
            .map(|id| {
                let s = self
                    .manifest
                    .get(id)
                    .ok_or_else(|| Error::NotFound(format!("sample `{id}`")))?;
                s.true_label.ok_or_else(|| Error::MissingLabel(id.clone()))
            })
            .collect()
    }

    fn source(&self) -> LabelSource {
        LabelSource::Oracle
    }
}

/// Drives the session until it is terminal, or until `pause_after`
/// iterations have completed with a batch pending.
pub fn run_with_annotator(
    session: &mut ALSessionState,
    mut model: Model,
    annotator: &mut dyn Annotator,
    manifest: &DatasetManifest,
    val_samples: &[Sample],
    pause_after: Option<usize>,
) -> Result<Model> {
    while !session.status.is_terminal() {
        match session.status {
            SessionStatus::Training => {
                model = step(session, model, manifest, val_samples)?;
            }
            SessionStatus::AwaitingLabels => {
                if pause_after.is_some_and(|n| session.history.len() >= n) {
                    break;
                }
                let ids = session
                    .pending_batch
                    .as_ref()
                    .map(|b| b.sample_ids.clone())
                    .unwrap_or_default();
                let labels = annotator.label(&ids)?;
                if labels.len() != ids.len() {
                    return Err(Error::Shape(format!(
                        "annotator returned {} labels for {} ids",
                        labels.len(),
                        ids.len()
                    )));
                }
                let map: BTreeMap<String, Label> = ids.into_iter().zip(labels).collect();
                submit_labels(session, &map, annotator.source())?;
            }
            _ => unreachable!("loop exits on terminal states"),
        }
    }
    Ok(model)
}

/// Full oracle run over the manifest's validation split.
pub fn run_with_oracle(
    session: &mut ALSessionState,
    model: Model,
    manifest: &DatasetManifest,
) -> Result<Model> {
    let val = manifest.split_samples(Split::Validation);
    let mut oracle = OracleAnnotator::new(manifest);
    run_with_annotator(session, model, &mut oracle, manifest, &val, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryStats {
    pub mean: f64,
    pub std: f64,
    pub peak: f64,
}

/// Mean, population standard deviation and maximum of validation accuracy
/// over iterations `from_iter..=to_iter`.
pub fn history_stats(history: &[HistoryRow], from_iter: usize, to_iter: usize) -> Result<HistoryStats> {
    let values: Vec<f64> = history
        .iter()
        .filter(|r| (from_iter..=to_iter).contains(&r.iteration))
        .map(|r| r.val_accuracy)
        .collect();
    if values.is_empty() {
        return Err(Error::Range(format!(
            "no history rows in iterations {from_iter}..={to_iter}"
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(HistoryStats {
        mean,
        std: var.sqrt(),
        peak,
    })
}

/// Labels consumed when validation accuracy first reached `target`.
pub fn labels_to_target(history: &[HistoryRow], target: f64) -> Option<usize> {
    history
        .iter()
        .find(|r| r.val_accuracy >= target)
        .map(|r| r.labeled_count)
}
