//! Session store. Each session is a directory holding the served session,
//! the unblinding map and an append-only annotation log:
//!
//! ```text
//! <root>/<session_id>/session.json
//! <root>/<session_id>/unblinding.json
//! <root>/<session_id>/annotations.jsonl
//! ```

use super::summary::{error_summary, SummaryRow};
use super::{AnnotationRecord, BlindedItem, CountsInput, EvalError, EvalSession, UnblindingMap};
use crate::clock::{format_timestamp, Clock};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

const SESSION_FILE: &str = "session.json";
const UNBLINDING_FILE: &str = "unblinding.json";
const LOG_FILE: &str = "annotations.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnnotatorProgress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub session_id: String,
    pub items: usize,
    pub annotators: BTreeMap<String, AnnotatorProgress>,
}

struct Loaded {
    session: EvalSession,
    unblinding: UnblindingMap,
    /// Keyed by (annotator, item).
    records: BTreeMap<(String, String), AnnotationRecord>,
    log: File,
}

pub struct SessionStore {
    root: PathBuf,
    sessions: Mutex<BTreeMap<String, Loaded>>,
}

fn io_err(path: &Path, e: impl ToString) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    let dir = path.parent().expect("file inside session dir");
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(text.as_bytes())
        .map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn open_log(path: &Path) -> Result<File, EvalError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))
}

/// Replays the log. A final line without its newline is a torn write and
/// is dropped; any other unparsable line is an error.
fn replay(path: &Path) -> Result<BTreeMap<(String, String), AnnotationRecord>, EvalError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(path, e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut records = BTreeMap::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AnnotationRecord>(line) {
            Ok(r) => {
                records
                    .entry((r.annotator_id.clone(), r.item_id.clone()))
                    .or_insert(r);
            }
            Err(_) if i + 1 == lines.len() && !complete => {
                log::warn!("{}: dropping torn final line", path.display());
            }
            Err(e) => return Err(io_err(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(records)
}

/// Cuts a partial final line so later appends start on a fresh line.
fn truncate_torn_tail(path: &Path) -> Result<(), EvalError> {
    let Ok(bytes) = std::fs::read(path) else {
        return Ok(());
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let f = OpenOptions::new()
        .write(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    f.set_len(keep as u64).map_err(|e| io_err(path, e))
}

impl SessionStore {
    /// Opens (creating if needed) a store root and loads every session in it.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, EvalError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        let mut sessions = BTreeMap::new();
        let entries = std::fs::read_dir(&root).map_err(|e| io_err(&root, e))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.join(SESSION_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let session: EvalSession = read_json(&dir.join(SESSION_FILE))?;
            let unblinding: UnblindingMap = read_json(&dir.join(UNBLINDING_FILE))?;
            let log_path = dir.join(LOG_FILE);
            let records = replay(&log_path)?;
            truncate_torn_tail(&log_path)?;
            let log = open_log(&log_path)?;
            sessions.insert(
                session.session_id.clone(),
                Loaded {
                    session,
                    unblinding,
                    records,
                    log,
                },
            );
        }
        Ok(Self {
            root,
            sessions: Mutex::new(sessions),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.lock().unwrap().keys().cloned().collect()
    }

    pub fn create(&self, session: EvalSession, unblinding: UnblindingMap) -> Result<(), EvalError> {
        let id = session.session_id.clone();
        if !valid_session_id(&id) {
            return Err(EvalError::Validation(format!(
                "session id {id:?} must be non-empty ASCII letters, digits, '-' or '_'"
            )));
        }
        let mut sessions = self.sessions.lock().unwrap();
        let dir = self.root.join(&id);
        if sessions.contains_key(&id) || dir.exists() {
            return Err(EvalError::SessionExists(id));
        }
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        write_json(&dir.join(UNBLINDING_FILE), &unblinding)?;
        let log = open_log(&dir.join(LOG_FILE))?;
        // Written last: a directory without session.json is not loaded.
        write_json(&dir.join(SESSION_FILE), &session)?;
        sessions.insert(
            id,
            Loaded {
                session,
                unblinding,
                records: BTreeMap::new(),
                log,
            },
        );
        Ok(())
    }

    fn with<R>(
        &self,
        session_id: &str,
        f: impl FnOnce(&mut Loaded) -> Result<R, EvalError>,
    ) -> Result<R, EvalError> {
        let mut sessions = self.sessions.lock().unwrap();
        let loaded = sessions
            .get_mut(session_id)
            .ok_or_else(|| EvalError::SessionNotFound(session_id.to_string()))?;
        f(loaded)
    }

    /// First item in the annotator's queue they have not annotated yet.
    pub fn next_item(
        &self,
        session_id: &str,
        annotator_id: &str,
    ) -> Result<Option<BlindedItem>, EvalError> {
        self.with(session_id, |l| {
            let queue = l
                .session
                .queues
                .get(annotator_id)
                .ok_or_else(|| EvalError::UnknownAnnotator(annotator_id.to_string()))?;
            Ok(queue
                .iter()
                .find(|id| {
                    !l.records
                        .contains_key(&(annotator_id.to_string(), (*id).clone()))
                })
                .map(|id| l.session.items[id].clone()))
        })
    }

    pub fn item_image(
        &self,
        session_id: &str,
        item_id: &str,
    ) -> Result<Option<PathBuf>, EvalError> {
        self.with(session_id, |l| {
            if !l.session.items.contains_key(item_id) {
                return Err(EvalError::ItemNotFound {
                    annotator_id: String::new(),
                    item_id: item_id.to_string(),
                });
            }
            Ok(l.session.images.get(item_id).cloned())
        })
    }

    /// Validates, appends to the log, then stores. The store lock is held
    /// throughout, so of two submissions for the same (annotator, item) the
    /// first wins and the second gets a conflict.
    pub fn submit(
        &self,
        session_id: &str,
        annotator_id: &str,
        item_id: &str,
        counts: &CountsInput,
        clock: &dyn Clock,
    ) -> Result<AnnotationRecord, EvalError> {
        self.with(session_id, |l| {
            let queue = l
                .session
                .queues
                .get(annotator_id)
                .ok_or_else(|| EvalError::UnknownAnnotator(annotator_id.to_string()))?;
            if !queue.iter().any(|id| id == item_id) {
                return Err(EvalError::ItemNotFound {
                    annotator_id: annotator_id.to_string(),
                    item_id: item_id.to_string(),
                });
            }
            let counts = counts.validate()?;
            let key = (annotator_id.to_string(), item_id.to_string());
            if l.records.contains_key(&key) {
                return Err(EvalError::Conflict {
                    annotator_id: annotator_id.to_string(),
                    item_id: item_id.to_string(),
                });
            }
            let record = AnnotationRecord {
                session_id: session_id.to_string(),
                annotator_id: annotator_id.to_string(),
                item_id: item_id.to_string(),
                counts,
                submitted_at: format_timestamp(clock.now()),
            };
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            let path = self.root.join(session_id).join(LOG_FILE);
            l.log
                .write_all(line.as_bytes())
                .map_err(|e| io_err(&path, e))?;
            l.log.sync_data().map_err(|e| io_err(&path, e))?;
            l.records.insert(key, record.clone());
            Ok(record)
        })
    }

    pub fn progress(&self, session_id: &str) -> Result<Progress, EvalError> {
        self.with(session_id, |l| {
            let annotators = l
                .session
                .queues
                .iter()
                .map(|(a, q)| {
                    let done = q
                        .iter()
                        .filter(|id| l.records.contains_key(&(a.clone(), (*id).clone())))
                        .count();
                    (
                        a.clone(),
                        AnnotatorProgress {
                            done,
                            total: q.len(),
                        },
                    )
                })
                .collect();
            Ok(Progress {
                session_id: session_id.to_string(),
                items: l.session.items.len(),
                annotators,
            })
        })
    }

    /// Consistent copy of the unblinding map and all records.
    pub fn snapshot(
        &self,
        session_id: &str,
    ) -> Result<(UnblindingMap, Vec<AnnotationRecord>), EvalError> {
        self.with(session_id, |l| {
            Ok((l.unblinding.clone(), l.records.values().cloned().collect()))
        })
    }

    pub fn summary(&self, session_id: &str) -> Result<Vec<SummaryRow>, EvalError> {
        let (map, records) = self.snapshot(session_id)?;
        error_summary(&map, &records)
    }
}
