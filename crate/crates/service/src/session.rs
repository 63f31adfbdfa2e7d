//! Annotation sessions: one active-learning run each, persisted as a state
//! snapshot plus a write-ahead journal of accepted label posts.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use facehop_core::active::{ActiveConfig, ActiveState, Phase};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::dataset::{Dataset, DatasetRef};
use crate::error::{ApiError, ApiResult};

const META: &str = "session.json";
const STATE: &str = "state.json";
const JOURNAL: &str = "labels.jsonl";

/// What a session was created with; never changes afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub idempotency_key: Option<String>,
    pub dataset: DatasetRef,
    pub config: ActiveConfig,
    /// Label the random seed set from the dataset's ground truth instead of
    /// asking the annotator.
    pub seed_from_ground_truth: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingLabels,
    Retraining,
    Done,
    Failed,
}

/// One label as journaled: pool index and answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Entry {
    index: usize,
    label: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JournalLine {
    request_id: Option<String>,
    labels: Vec<Entry>,
}

/// Reply to a label post; replays of a request id return the stored one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReceipt {
    pub request_id: Option<String>,
    pub accepted: usize,
    pub pending: usize,
    pub labeled: usize,
    #[serde(default)]
    pub replayed: bool,
}

pub struct Inner {
    pub state: ActiveState,
    pub status: Status,
    pub failure: Option<String>,
    receipts: HashMap<String, LabelReceipt>,
}

pub struct Session {
    pub meta: SessionMeta,
    pub dataset: Arc<Dataset>,
    dir: PathBuf,
    /// Single writer per session: label posts and retraining results go
    /// through this lock.
    pub inner: Mutex<Inner>,
}

/// A label as posted by a client.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct PostedLabel {
    pub pair_id: String,
    #[serde(rename = "match")]
    pub is_match: bool,
}

impl Session {
    /// Create and persist a new session. Returns it with its status set; the
    /// caller starts retraining if the seed set is already labeled.
    pub fn create(meta: SessionMeta, dataset: Arc<Dataset>, store_root: &Path) -> ApiResult<Self> {
        let mut state = ActiveState::new(meta.config.clone(), dataset.pool.len())
            .map_err(|e| ApiError::unprocessable("invalid_config", e.to_string()))?;
        if meta.seed_from_ground_truth {
            for index in state.pending.clone() {
                state.submit_label(index, dataset.pool_truth[index])?;
            }
        }
        let dir = store_root.join(&meta.id);
        std::fs::create_dir_all(&dir)?;
        facehop_core::container::write_atomic(&dir.join(META), &serde_json::to_vec_pretty(&meta).map_err(internal)?)?;
        state.save(&dir.join(STATE))?;
        File::create(dir.join(JOURNAL))?.sync_all()?;
        let status = status_of(&state);
        Ok(Self { meta, dataset, dir, inner: Mutex::new(Inner { state, status, failure: None, receipts: HashMap::new() }) })
    }

    /// Read the metadata of a stored session.
    pub fn read_meta(dir: &Path) -> ApiResult<SessionMeta> {
        let bytes = std::fs::read(dir.join(META))?;
        serde_json::from_slice(&bytes).map_err(internal)
    }

    /// Restore a stored session: snapshot first, then every journaled label
    /// the snapshot does not yet hold.
    pub fn open(dir: &Path, meta: SessionMeta, dataset: Arc<Dataset>) -> ApiResult<Self> {
        let mut state = ActiveState::load(&dir.join(STATE))?;
        let mut receipts = HashMap::new();
        let journal = dir.join(JOURNAL);
        if journal.exists() {
            for (n, line) in BufReader::new(File::open(&journal)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let Ok(entry) = serde_json::from_str::<JournalLine>(&line) else {
                    // A torn final write is the only way to get here; the post
                    // it belonged to was never acknowledged.
                    log::warn!("session {}: ignoring unreadable journal line {}", meta.id, n + 1);
                    continue;
                };
                for e in &entry.labels {
                    if state.pending.contains(&e.index) && !state.is_labeled(e.index) {
                        state.submit_label(e.index, e.label)?;
                    }
                }
                if let Some(id) = &entry.request_id {
                    receipts.insert(
                        id.clone(),
                        LabelReceipt {
                            request_id: Some(id.clone()),
                            accepted: entry.labels.len(),
                            pending: state.pending.len(),
                            labeled: state.labeled.len(),
                            replayed: false,
                        },
                    );
                }
            }
        }
        let status = status_of(&state);
        Ok(Self { meta, dataset, dir: dir.to_path_buf(), inner: Mutex::new(Inner { state, status, failure: None, receipts }) })
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    /// Validate and record a batch of labels. Either every label is accepted
    /// or none is. Returns the receipt and whether the round is complete.
    pub async fn post_labels(&self, request_id: Option<String>, labels: &[PostedLabel]) -> ApiResult<(LabelReceipt, bool)> {
        let mut inner = self.inner.lock().await;
        if let Some(id) = &request_id {
            if let Some(r) = inner.receipts.get(id) {
                return Ok((LabelReceipt { replayed: true, ..r.clone() }, false));
            }
        }
        match inner.status {
            Status::Done => return Err(ApiError::new(axum::http::StatusCode::GONE, "session_done", "the session is finished")),
            Status::Retraining => {
                return Err(ApiError::conflict("retraining", "labels are not accepted while the model retrains"))
            }
            Status::Failed => {
                return Err(ApiError::conflict("session_failed", inner.failure.clone().unwrap_or_default()))
            }
            Status::AwaitingLabels => {}
        }
        if labels.is_empty() {
            return Err(ApiError::unprocessable("empty_batch", "no labels given"));
        }

        let mut entries: Vec<Entry> = Vec::with_capacity(labels.len());
        for l in labels {
            let pending = inner.state.pending.iter().copied().find(|&i| {
                self.dataset.pool_ids[i] == l.pair_id && !entries.iter().any(|e| e.index == i)
            });
            match pending {
                Some(index) => entries.push(Entry { index, label: l.is_match }),
                None if self.dataset.index_of(&l.pair_id).is_none() => {
                    return Err(ApiError::conflict("unknown_pair", format!("pair {} is not in this session", l.pair_id)))
                }
                None if entries.iter().any(|e| self.dataset.pool_ids[e.index] == l.pair_id)
                    || self.labeled_id(&inner.state, &l.pair_id) =>
                {
                    return Err(ApiError::conflict("already_labeled", format!("pair {} is already labeled", l.pair_id)))
                }
                None => return Err(ApiError::conflict("not_pending", format!("pair {} has not been queried", l.pair_id))),
            }
        }

        // Write ahead: once acknowledged, the labels survive a crash.
        self.append_journal(&JournalLine { request_id: request_id.clone(), labels: entries.clone() })?;
        for e in &entries {
            inner.state.submit_label(e.index, e.label)?;
        }
        let receipt = LabelReceipt {
            request_id: request_id.clone(),
            accepted: entries.len(),
            pending: inner.state.pending.len(),
            labeled: inner.state.labeled.len(),
            replayed: false,
        };
        if let Some(id) = request_id {
            inner.receipts.insert(id, receipt.clone());
        }
        let complete = inner.state.phase() == Phase::ReadyToTrain;
        if complete {
            inner.status = Status::Retraining;
        }
        Ok((receipt, complete))
    }

    fn labeled_id(&self, state: &ActiveState, pair_id: &str) -> bool {
        state.labeled.iter().any(|s| self.dataset.pool_ids[s.index] == pair_id)
    }

    fn append_journal(&self, line: &JournalLine) -> ApiResult<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join(JOURNAL))?;
        let mut bytes = serde_json::to_vec(line).map_err(internal)?;
        bytes.push(b'\n');
        f.write_all(&bytes)?;
        f.sync_data()?;
        Ok(())
    }

    /// Retrain on the current labels off the async runtime, then store the
    /// new round. Called when a round's labels are complete.
    pub async fn retrain(self: Arc<Self>) {
        let state = {
            let mut inner = self.inner.lock().await;
            if inner.state.phase() != Phase::ReadyToTrain {
                return;
            }
            inner.status = Status::Retraining;
            inner.state.clone()
        };
        let dataset = self.dataset.clone();
        let result = tokio::task::spawn_blocking(move || {
            let mut state = state;
            state.advance(&dataset.pool, dataset.test()).map(|_| state)
        })
        .await;
        let mut inner = self.inner.lock().await;
        match result {
            Ok(Ok(state)) => {
                if let Err(e) = state.save(&self.dir.join(STATE)) {
                    log::error!("session {}: could not save state: {e}", self.id());
                }
                inner.status = status_of(&state);
                inner.state = state;
            }
            Ok(Err(e)) => {
                log::error!("session {}: retraining failed: {e}", self.id());
                inner.status = Status::Failed;
                inner.failure = Some(e.to_string());
            }
            Err(e) => {
                inner.status = Status::Failed;
                inner.failure = Some(format!("retraining task aborted: {e}"));
            }
        }
    }
}

fn status_of(state: &ActiveState) -> Status {
    match state.phase() {
        Phase::Done => Status::Done,
        Phase::ReadyToTrain => Status::Retraining,
        Phase::AwaitingLabels => Status::AwaitingLabels,
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::internal(e.to_string())
}
