//! Session directory layout:
//!
//! ```text
//! session.json          state, format version, state checksum
//! history.csv           iteration,val_accuracy,labeled_count,timestamp
//! batches/NNN.json      every issued batch with scores
//! checkpoints/*.ckpt    model after each completed iteration
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ALSessionState, HistoryRow};
use crate::classifier::{load_checkpoint, save_checkpoint, Model};
use crate::error::{Error, Result};

pub const SESSION_FORMAT_VERSION: u32 = 1;

const SESSION_FILE: &str = "session.json";
const HISTORY_FILE: &str = "history.csv";
const HISTORY_HEADER: &str = "iteration,val_accuracy,labeled_count,timestamp";
const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Which per-iteration model checkpoints survive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointRetention {
    #[default]
    All,
    Last,
    /// Only the newest is kept while running (resume needs one); a
    /// terminal session keeps just `final.ckpt`.
    Final,
}

#[derive(Serialize)]
struct SessionFileOut<'a> {
    format_version: u32,
    state_sha256: String,
    state: &'a ALSessionState,
}

#[derive(Deserialize)]
struct SessionFileIn {
    state_sha256: String,
    state: ALSessionState,
}

fn state_digest(state: &ALSessionState) -> Result<String> {
    let bytes = serde_json::to_vec(state).map_err(|e| Error::json("session state", e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn format_row(r: &HistoryRow) -> String {
    format!(
        "{},{},{},{}\n",
        r.iteration,
        r.val_accuracy,
        r.labeled_count,
        r.timestamp.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true)
    )
}

/// Appends rows not yet on disk, one fsync per row. A file holding rows the
/// state does not know about (state older than history) is rewritten.
fn sync_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let on_disk = if path.exists() {
        load_history_csv(path)?.len()
    } else {
        0
    };
    if on_disk > history.len() || !path.exists() {
        let mut text = format!("{HISTORY_HEADER}\n");
        history.iter().for_each(|r| text.push_str(&format_row(r)));
        return write_atomic(path, text.as_bytes());
    }
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for row in &history[on_disk..] {
        f.write_all(format_row(row).as_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.sync_data().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HISTORY_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{HISTORY_HEADER}`"),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            Ok(HistoryRow {
                iteration: f[0].parse().map_err(|_| bad("bad iteration"))?,
                val_accuracy: f[1].parse().map_err(|_| bad("bad val_accuracy"))?,
                labeled_count: f[2].parse().map_err(|_| bad("bad labeled_count"))?,
                timestamp: chrono::DateTime::parse_from_rfc3339(f[3])
                    .map_err(|_| bad("bad timestamp"))?
                    .to_utc(),
            })
        })
        .collect()
}

fn checkpoint_name(completed: usize) -> String {
    format!("model_{completed:03}.ckpt")
}

fn apply_retention(ckpt_dir: &Path, keep: &str, state: &ALSessionState) -> Result<Option<PathBuf>> {
    use super::CheckpointRetention as R;
    let retention = state.config.retention;
    if retention == R::All {
        return Ok(None);
    }
    let finalize = retention == R::Final && state.status.is_terminal();
    if finalize {
        let from = ckpt_dir.join(keep);
        let to = ckpt_dir.join(FINAL_CHECKPOINT);
        fs::rename(&from, &to).map_err(|e| Error::io(&from, e))?;
    }
    let survivor = if finalize { FINAL_CHECKPOINT } else { keep };
    for entry in fs::read_dir(ckpt_dir).map_err(|e| Error::io(ckpt_dir, e))? {
        let entry = entry.map_err(|e| Error::io(ckpt_dir, e))?;
        let name = entry.file_name();
        if name != survivor && name.to_string_lossy().ends_with(".ckpt") {
            fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(finalize.then(|| PathBuf::from("checkpoints").join(FINAL_CHECKPOINT)))
}

/// Persists the session. With `model`, a checkpoint for the current number
/// of completed iterations is written and referenced from the state.
pub fn save_session(dir: &Path, state: &mut ALSessionState, model: Option<&Model>) -> Result<()> {
    let batches = dir.join("batches");
    let ckpts = dir.join("checkpoints");
    for d in [dir, batches.as_path(), ckpts.as_path()] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    if let Some(model) = model {
        let name = checkpoint_name(state.history.len());
        save_checkpoint(model, &ckpts.join(&name))?;
        state.model_checkpoint_ref = Some(PathBuf::from("checkpoints").join(&name));
        if let Some(fin) = apply_retention(&ckpts, &name, state)? {
            state.model_checkpoint_ref = Some(fin);
        }
    }
    if let Some(batch) = &state.pending_batch {
        let path = batches.join(format!("{:03}.json", batch.iteration));
        let json = serde_json::to_vec_pretty(batch).map_err(|e| Error::json("query batch", e))?;
        write_atomic(&path, &json)?;
    }
    sync_history(&dir.join(HISTORY_FILE), &state.history)?;

    let out = SessionFileOut {
        format_version: SESSION_FORMAT_VERSION,
        state_sha256: state_digest(state)?,
        state,
    };
    let json = serde_json::to_vec_pretty(&out).map_err(|e| Error::json("session file", e))?;
    write_atomic(&dir.join(SESSION_FILE), &json)
}

/// Loads and verifies a saved session. The referenced checkpoint must exist
/// and history.csv must hold every recorded iteration.
pub fn resume_session(dir: &Path) -> Result<ALSessionState> {
    let path = dir.join(SESSION_FILE);
    if !path.is_file() {
        return Err(Error::NotFound(format!("no session at {}", dir.display())));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let corrupt = |m: String| Error::Checksum(format!("{}: {m}", path.display()));

    #[derive(Deserialize)]
    struct VersionProbe {
        format_version: u32,
    }
    let probe: VersionProbe =
        serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("unreadable: {e}")))?;
    if probe.format_version != SESSION_FORMAT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            supported: SESSION_FORMAT_VERSION,
        });
    }
    let file: SessionFileIn =
        serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("unreadable: {e}")))?;
    let digest = state_digest(&file.state)?;
    if digest != file.state_sha256 {
        return Err(corrupt(format!(
            "state sha256 {digest} does not match recorded {}",
            file.state_sha256
        )));
    }
    let state = file.state;

    if let Some(rel) = &state.model_checkpoint_ref {
        let ckpt = dir.join(rel);
        if !ckpt.is_file() {
            return Err(Error::Integrity(format!(
                "checkpoint {} is missing",
                ckpt.display()
            )));
        }
    }
    let history_path = dir.join(HISTORY_FILE);
    let on_disk = if history_path.exists() {
        load_history_csv(&history_path)?
    } else {
        Vec::new()
    };
    if on_disk.len() < state.history.len() || on_disk[..state.history.len()] != state.history[..] {
        return Err(Error::Integrity(format!(
            "{} disagrees with the session state",
            history_path.display()
        )));
    }
    Ok(state)
}

/// The model referenced by a resumed session.
pub fn session_model(dir: &Path, state: &ALSessionState) -> Result<Model> {
    let rel = state
        .model_checkpoint_ref
        .as_ref()
        .ok_or_else(|| Error::Integrity(format!("session `{}` has no checkpoint", state.session_id)))?;
    load_checkpoint(&dir.join(rel))
}
