//! Append-only session logs.
//!
//! Each session lives in `<data>/sessions/<id>.jsonl`: a `created` event
//! followed by one `accepted` event per committed restoration. The current
//! text is always the replay of that log.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub start: usize,
    pub length: usize,
    pub text: String,
    pub log_prob: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub model: String,
    pub initial_text: String,
    pub text: String,
    pub history: Vec<HistoryEntry>,
    pub created_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Created {
        id: String,
        model: String,
        text: String,
        timestamp_ms: u64,
    },
    Accepted(HistoryEntry),
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Writes `fill` over `[start, start + length)` of `text`, which must be a
/// run of `-` of exactly that length.
pub fn apply(text: &str, start: usize, length: usize, fill: &str) -> Result<String, String> {
    let mut chars: Vec<char> = text.chars().collect();
    let fill: Vec<char> = fill.chars().collect();
    if length == 0 || fill.len() != length {
        return Err(format!(
            "restoration has {} characters for a span of {length}",
            fill.len()
        ));
    }
    let end = start.checked_add(length).filter(|&e| e <= chars.len());
    let Some(end) = end else {
        return Err(format!("span {start}+{length} is outside the text"));
    };
    if let Some(i) = (start..end).find(|&i| chars[i] != '-') {
        return Err(format!("position {i} is not a missing character"));
    }
    chars[start..end].copy_from_slice(&fill);
    Ok(chars.into_iter().collect())
}

impl Session {
    /// Rebuilds the current text from the initial text and the history.
    pub fn replay(&self) -> Result<String, String> {
        self.history
            .iter()
            .try_fold(self.initial_text.clone(), |t, h| apply(&t, h.start, h.length, &h.text))
    }

    fn from_events(events: Vec<Event>) -> Result<Self, String> {
        let mut it = events.into_iter();
        let Some(Event::Created {
            id,
            model,
            text,
            timestamp_ms,
        }) = it.next()
        else {
            return Err("log does not start with a created event".into());
        };
        let mut s = Session {
            id,
            model,
            initial_text: text.clone(),
            text,
            history: Vec::new(),
            created_ms: timestamp_ms,
        };
        for e in it {
            match e {
                Event::Accepted(h) => {
                    s.text = apply(&s.text, h.start, h.length, &h.text)?;
                    s.history.push(h);
                }
                Event::Created { .. } => return Err("duplicate created event".into()),
            }
        }
        Ok(s)
    }
}

/// Sessions in memory, each behind its own lock, mirrored to disk.
pub struct SessionStore {
    dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

fn append(path: &Path, event: &Event) -> Result<(), ApiError> {
    let mut line = serde_json::to_string(event).map_err(|e| ApiError::Internal(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
    f.write_all(line.as_bytes())
        .and_then(|_| f.sync_data())
        .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))
}

impl SessionStore {
    /// Opens (creating if needed) `<data>/sessions` and replays every log.
    pub fn open(data_dir: &Path) -> Result<Self, ApiError> {
        let dir = data_dir.join("sessions");
        fs::create_dir_all(&dir).map_err(|e| ApiError::Internal(format!("{}: {e}", dir.display())))?;
        let mut sessions = HashMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| ApiError::Internal(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        for path in entries {
            let src = fs::read_to_string(&path).map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
            let events = src
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str::<Event>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
            let s = Session::from_events(events).map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
            sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
        }
        Ok(Self {
            dir,
            sessions: RwLock::new(sessions),
        })
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub async fn create(&self, text: String, model: String) -> Result<Session, ApiError> {
        let id = uuid::Uuid::new_v4().to_string();
        let timestamp_ms = now_ms();
        append(
            &self.path(&id),
            &Event::Created {
                id: id.clone(),
                model: model.clone(),
                text: text.clone(),
                timestamp_ms,
            },
        )?;
        let s = Session {
            id: id.clone(),
            model,
            initial_text: text.clone(),
            text,
            history: Vec::new(),
            created_ms: timestamp_ms,
        };
        self.sessions.write().await.insert(id, Arc::new(Mutex::new(s.clone())));
        Ok(s)
    }

    pub async fn handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))
    }

    pub async fn get(&self, id: &str) -> Result<Session, ApiError> {
        Ok(self.handle(id).await?.lock().await.clone())
    }

    /// Persists an accepted entry and applies it. The caller holds the
    /// session lock, which serializes writers per session.
    pub fn commit(&self, session: &mut Session, entry: HistoryEntry) -> Result<(), ApiError> {
        let text = apply(&session.text, entry.start, entry.length, &entry.text).map_err(ApiError::BadRequest)?;
        append(&self.path(&session.id), &Event::Accepted(entry.clone()))?;
        session.text = text;
        session.history.push(entry);
        Ok(())
    }

    pub async fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().await.keys().cloned().collect();
        ids.sort();
        ids
    }
}
