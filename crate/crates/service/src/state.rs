use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::http::StatusCode;
use defectlab_core::active_learning::{
    request_stop, resume_session, save_session, session_model, step, submit_labels, ALConfig,
    ALSessionState, HistoryRow, SessionStatus,
};
use defectlab_core::classifier::{build_model, Model, ModelConfig};
use defectlab_core::dataset::{load_manifest, DatasetManifest, Label, LabelSource, Sample, Split};
use defectlab_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::watch;
use tokio::task::JoinSet;

use crate::error::ApiError;

const REPLIES_FILE: &str = "replies.json";

#[derive(Clone, Debug, Default)]
pub struct ServiceConfig {
    /// Required in the `x-api-token` header when set.
    pub token: Option<String>,
    /// Used when a create request names no model.
    pub default_model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub status: SessionStatus,
    pub iteration: usize,
    pub labeled_count: usize,
    pub pool_remaining: usize,
    pub latest_val_accuracy: Option<f64>,
}

impl SessionSummary {
    pub fn of(state: &ALSessionState) -> Self {
        SessionSummary {
            session_id: state.session_id.clone(),
            status: state.status,
            iteration: state.iteration,
            labeled_count: state.pool.labeled_count(),
            pool_remaining: state.pool.unlabeled_count(),
            latest_val_accuracy: state.latest_val_accuracy(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct CreateSession {
    #[serde(default)]
    pub session_id: Option<String>,
    pub manifest_path: PathBuf,
    pub config: ALConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub sample_id: String,
    pub image_url: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingPayload {
    pub session_id: String,
    pub status: SessionStatus,
    pub iteration: usize,
    pub items: Vec<PendingItem>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct LabelsRequest {
    pub labels: BTreeMap<String, u8>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredReply {
    status: u16,
    body: Value,
}

struct Slot {
    state: ALSessionState,
    model: Option<Model>,
    stepping: bool,
    replies: BTreeMap<String, StoredReply>,
}

struct SessionHandle {
    dir: PathBuf,
    manifest: Arc<DatasetManifest>,
    val: Vec<Sample>,
    slot: tokio::sync::Mutex<Slot>,
    status: watch::Sender<SessionStatus>,
}

impl SessionHandle {
    fn publish(&self, status: SessionStatus) {
        self.status.send_replace(status);
    }
}

struct Inner {
    store: PathBuf,
    config: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Arc<SessionHandle>>>,
    tasks: Mutex<JoinSet<()>>,
}

/// Shared service state: every session in the store plus in-flight training.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn load_replies(dir: &Path) -> BTreeMap<String, StoredReply> {
    fs::read(dir.join(REPLIES_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default()
}

fn save_replies(dir: &Path, replies: &BTreeMap<String, StoredReply>) -> defectlab_core::Result<()> {
    let path = dir.join(REPLIES_FILE);
    let json = serde_json::to_vec(replies).map_err(|e| Error::json("replies", e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

impl AppState {
    /// Loads every session under `store`. Sessions left in `training` are
    /// stepped again. A session that fails verification is skipped with a
    /// warning rather than taking the whole store down.
    pub async fn open(store: &Path, config: ServiceConfig) -> defectlab_core::Result<AppState> {
        fs::create_dir_all(store).map_err(|e| Error::io(store, e))?;
        let state = AppState {
            inner: Arc::new(Inner {
                store: store.to_path_buf(),
                config,
                sessions: RwLock::new(BTreeMap::new()),
                tasks: Mutex::new(JoinSet::new()),
            }),
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(store)
            .map_err(|e| Error::io(store, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("session.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            match Self::load_one(&dir) {
                Ok(handle) => {
                    let id = handle.slot.lock().await.state.session_id.clone();
                    let handle = Arc::new(handle);
                    state.inner.sessions.write().unwrap().insert(id, handle.clone());
                    state.spawn_step(handle);
                }
                Err(e) => tracing::warn!(dir = %dir.display(), error = %e, "skipping session"),
            }
        }
        Ok(state)
    }

    fn load_one(dir: &Path) -> defectlab_core::Result<SessionHandle> {
        let state = resume_session(dir)?;
        let manifest_path = state.manifest_path.clone().ok_or_else(|| {
            Error::Integrity(format!("session `{}` records no manifest", state.session_id))
        })?;
        let manifest = load_manifest(&manifest_path)?;
        Ok(Self::handle(dir.to_path_buf(), manifest, state, None, load_replies(dir)))
    }

    fn handle(
        dir: PathBuf,
        manifest: DatasetManifest,
        state: ALSessionState,
        model: Option<Model>,
        replies: BTreeMap<String, StoredReply>,
    ) -> SessionHandle {
        let val = manifest.split_samples(Split::Validation);
        let (tx, _) = watch::channel(state.status);
        SessionHandle {
            dir,
            manifest: Arc::new(manifest),
            val,
            slot: tokio::sync::Mutex::new(Slot {
                state,
                model,
                stepping: false,
                replies,
            }),
            status: tx,
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.inner
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session `{id}`")).into())
    }

    fn all(&self) -> Vec<Arc<SessionHandle>> {
        self.inner.sessions.read().unwrap().values().cloned().collect()
    }

    pub async fn create_session(&self, req: CreateSession) -> Result<SessionSummary, ApiError> {
        let id = match req.session_id {
            Some(id) if valid_session_id(&id) => id,
            Some(id) => {
                return Err(ApiError::bad_request(format!(
                    "session id `{id}` must be 1-64 characters of [A-Za-z0-9_-]"
                )))
            }
            None => {
                let taken = self.inner.sessions.read().unwrap();
                (1..)
                    .map(|n| format!("session-{n:04}"))
                    .find(|id| !taken.contains_key(id) && !self.inner.store.join(id).exists())
                    .expect("unbounded range")
            }
        };
        let dir = self.inner.store.join(&id);
        if self.inner.sessions.read().unwrap().contains_key(&id) || dir.exists() {
            return Err(Error::Conflict(format!("session `{id}` already exists")).into());
        }
        let manifest_path = fs::canonicalize(&req.manifest_path)
            .map_err(|e| Error::io(&req.manifest_path, e))?;
        let manifest = load_manifest(&manifest_path)?;
        let model_cfg = req.model.unwrap_or_else(|| self.inner.config.default_model.clone());
        let mut state = ALSessionState::new(&id, req.config, &manifest)?;
        state.manifest_path = Some(manifest_path);
        let seed = state.config.rng_seed;
        let model = tokio::task::spawn_blocking(move || build_model(&model_cfg, seed))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
        save_session(&dir, &mut state, Some(&model))?;
        let summary = SessionSummary::of(&state);
        let handle = Arc::new(Self::handle(dir, manifest, state, Some(model), BTreeMap::new()));
        {
            let mut sessions = self.inner.sessions.write().unwrap();
            if sessions.contains_key(&id) {
                return Err(Error::Conflict(format!("session `{id}` already exists")).into());
            }
            sessions.insert(id, handle.clone());
        }
        self.spawn_step(handle);
        Ok(summary)
    }

    pub async fn summaries(&self) -> Vec<SessionSummary> {
        let mut out = Vec::new();
        for h in self.all() {
            out.push(SessionSummary::of(&h.slot.lock().await.state));
        }
        out
    }

    pub async fn summary(&self, id: &str) -> Result<SessionSummary, ApiError> {
        let h = self.get(id)?;
        let slot = h.slot.lock().await;
        Ok(SessionSummary::of(&slot.state))
    }

    pub async fn pending(&self, id: &str) -> Result<PendingPayload, ApiError> {
        let h = self.get(id)?;
        let slot = h.slot.lock().await;
        let state = &slot.state;
        let items = match (&state.status, &state.pending_batch) {
            (SessionStatus::AwaitingLabels, Some(batch)) => batch
                .sample_ids
                .iter()
                .zip(&batch.scores)
                .map(|(sid, &score)| PendingItem {
                    sample_id: sid.clone(),
                    image_url: image_url(id, sid),
                    score,
                })
                .collect(),
            _ => Vec::new(),
        };
        Ok(PendingPayload {
            session_id: id.to_string(),
            status: state.status,
            iteration: state.iteration,
            items,
        })
    }

    /// Applies a full batch of human labels. A key seen before returns the
    /// stored reply without touching the pool; failed submissions are not
    /// stored, so a corrected retry may reuse its key.
    pub async fn submit(&self, id: &str, req: LabelsRequest) -> Result<(StatusCode, Value), ApiError> {
        let h = self.get(id)?;
        let mut labels = BTreeMap::new();
        for (sid, v) in req.labels {
            let label = Label::try_from(v)
                .map_err(|_| Error::Range(format!("label for `{sid}` must be 0 or 1, got {v}")))?;
            labels.insert(sid, label);
        }
        let mut slot = h.slot.lock().await;
        if let Some(reply) = req.idempotency_key.as_ref().and_then(|k| slot.replies.get(k)) {
            let status = StatusCode::from_u16(reply.status).unwrap_or(StatusCode::OK);
            return Ok((status, reply.body.clone()));
        }
        let slot = &mut *slot;
        let before = slot.state.clone();
        submit_labels(&mut slot.state, &labels, LabelSource::Human)?;
        if let Err(e) = save_session(&h.dir, &mut slot.state, None) {
            slot.state = before;
            return Err(e.into());
        }
        let body = serde_json::json!({
            "session_id": id,
            "status": slot.state.status,
            "iteration": slot.state.iteration,
            "labeled_count": slot.state.pool.labeled_count(),
        });
        if let Some(key) = req.idempotency_key {
            slot.replies.insert(
                key,
                StoredReply {
                    status: StatusCode::ACCEPTED.as_u16(),
                    body: body.clone(),
                },
            );
            save_replies(&h.dir, &slot.replies)?;
        }
        h.publish(slot.state.status);
        self.spawn_step(h.clone());
        Ok((StatusCode::ACCEPTED, body))
    }

    pub async fn history(&self, id: &str) -> Result<Vec<HistoryRow>, ApiError> {
        let h = self.get(id)?;
        let slot = h.slot.lock().await;
        Ok(slot.state.history.clone())
    }

    pub async fn stop(&self, id: &str) -> Result<SessionSummary, ApiError> {
        let h = self.get(id)?;
        let mut slot = h.slot.lock().await;
        request_stop(&mut slot.state)?;
        save_session(&h.dir, &mut slot.state, None)?;
        h.publish(slot.state.status);
        Ok(SessionSummary::of(&slot.state))
    }

    /// Resolves a sample id to an image file inside its manifest's root.
    pub fn image_path(&self, session: Option<&str>, sample_id: &str) -> Result<PathBuf, ApiError> {
        let handles = match session {
            Some(id) => vec![self.get(id)?],
            None => self.all(),
        };
        let (root, image) = handles
            .iter()
            .find_map(|h| {
                h.manifest
                    .get(sample_id)
                    .map(|s| (h.manifest.source_root.clone(), s.image_ref.clone()))
            })
            .ok_or_else(|| ApiError::from(Error::NotFound(format!("sample `{sample_id}`"))))?;
        let root = fs::canonicalize(&root).map_err(|e| Error::io(&root, e))?;
        let image = fs::canonicalize(root.join(&image))
            .map_err(|_| Error::NotFound(format!("image for sample `{sample_id}`")))?;
        if !image.starts_with(&root) {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "forbidden",
                format!("image for sample `{sample_id}` lies outside the dataset root"),
            ));
        }
        Ok(image)
    }

    /// Resolves once the session's status satisfies `pred`.
    pub async fn wait_for(
        &self,
        id: &str,
        pred: impl Fn(SessionStatus) -> bool,
    ) -> Result<SessionStatus, ApiError> {
        let h = self.get(id)?;
        let mut rx = h.status.subscribe();
        loop {
            let current = *rx.borrow_and_update();
            if pred(current) {
                let slot = h.slot.lock().await;
                if pred(slot.state.status) && !slot.stepping {
                    return Ok(slot.state.status);
                }
            }
            if rx.changed().await.is_err() {
                return Err(ApiError::new(StatusCode::GONE, "gone", "session closed"));
            }
        }
    }

    fn spawn_step(&self, h: Arc<SessionHandle>) {
        let mut tasks = self.inner.tasks.lock().unwrap();
        while tasks.try_join_next().is_some() {}
        tasks.spawn(drive(h));
    }

    /// Waits for in-flight training and persists every session.
    pub async fn shutdown(&self) {
        let mut tasks = std::mem::take(&mut *self.inner.tasks.lock().unwrap());
        while tasks.join_next().await.is_some() {}
        for h in self.all() {
            let mut slot = h.slot.lock().await;
            if let Err(e) = save_session(&h.dir, &mut slot.state, None) {
                tracing::error!(dir = %h.dir.display(), error = %e, "failed to persist session");
            }
        }
    }
}

fn image_url(session_id: &str, sample_id: &str) -> String {
    format!("/images/{sample_id}?session={session_id}")
}

/// One engine transition off the request path. The model is trained on a
/// copy of the state; a stop requested meanwhile is applied once the
/// iteration completes.
async fn drive(h: Arc<SessionHandle>) {
    let (work, model) = {
        let mut slot = h.slot.lock().await;
        if slot.stepping || slot.state.status != SessionStatus::Training {
            return;
        }
        slot.stepping = true;
        (slot.state.clone(), slot.model.take())
    };
    let handle = h.clone();
    let joined = tokio::task::spawn_blocking(move || {
        let h = handle;
        let mut work = work;
        let outcome = match model {
            Some(m) => Ok(m),
            None => session_model(&h.dir, &work),
        }
        .and_then(|m| step(&mut work, m, &h.manifest, &h.val));
        let mut slot = h.slot.blocking_lock();
        slot.stepping = false;
        let model = match outcome {
            Ok(m) => Some(m),
            Err(e) => {
                tracing::error!(session = %work.session_id, error = %e, "iteration failed");
                if !work.status.is_terminal() {
                    work.status = SessionStatus::Aborted;
                    work.abort_cause = Some(format!("{}: {e}", e.code()));
                }
                None
            }
        };
        if slot.state.stop_requested && !work.stop_requested {
            work.stop_requested = true;
            if work.status == SessionStatus::AwaitingLabels {
                request_stop(&mut work).expect("awaiting labels accepts a stop");
            }
        }
        if let Err(e) = save_session(&h.dir, &mut work, model.as_ref()) {
            tracing::error!(session = %work.session_id, error = %e, "failed to persist session");
        }
        slot.state = work;
        slot.model = model;
        h.publish(slot.state.status);
    })
    .await;
    if let Err(e) = joined {
        tracing::error!(error = %e, "training task panicked");
        let mut slot = h.slot.lock().await;
        slot.stepping = false;
        slot.state.status = SessionStatus::Aborted;
        slot.state.abort_cause = Some(format!("internal: {e}"));
        h.publish(slot.state.status);
    }
}
