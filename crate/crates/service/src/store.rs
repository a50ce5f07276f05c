use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use affwild::annotation::io::{format_trace, read_trace};
use affwild::annotation::{AnnotationManifest, AnnotationTrace, Dimension};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

const JOURNAL_DIR: &str = "journal";
const TRACE_DIR: &str = "traces";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Open,
    Closed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub annotator_id: String,
    pub video_id: String,
    pub dimension: Dimension,
    /// Unix milliseconds; unknown for sessions recovered from a bare trace.
    pub started_at_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    #[serde(flatten)]
    pub meta: SessionMeta,
    pub state: SessionState,
    pub sample_count: usize,
    pub last_timestamp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushOutcome {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    /// Samples held by the session after this push.
    pub total: usize,
}

#[derive(Debug)]
struct Session {
    meta: SessionMeta,
    state: SessionState,
    /// Media time in whole milliseconds.
    samples: Vec<(i64, f64)>,
    journal: Option<File>,
}

impl Session {
    fn summary(&self) -> SessionSummary {
        SessionSummary {
            meta: self.meta.clone(),
            state: self.state,
            sample_count: self.samples.len(),
            last_timestamp: self.samples.last().map(|&(t, _)| seconds(t)),
        }
    }

    fn trace(&self) -> Result<AnnotationTrace<f64>, ServiceError> {
        let samples = self.samples.iter().map(|&(t, v)| (seconds(t), v)).collect();
        AnnotationTrace::new(
            self.meta.annotator_id.clone(),
            self.meta.video_id.clone(),
            self.meta.dimension,
            samples,
        )
        .map_err(|e| ServiceError::Validation(e.to_string()))
    }
}

fn seconds(ms: i64) -> f64 {
    ms as f64 / 1000.0
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && !s
            .chars()
            .any(|c| c.is_whitespace() || c == '=' || c == ',' || c == '/')
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Io(format!("{}: {e}", path.display()))
}

/// Write to a sibling temp file, fsync, then rename over `path`.
fn write_durable(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Open sessions live in memory with an append-only journal per session;
/// closing a session writes `traces/<session_id>.trace`.
#[derive(Debug)]
pub struct SessionStore {
    manifest: AnnotationManifest,
    dir: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionStore {
    /// Opens `dir`, restoring closed sessions from their trace files and
    /// open ones from their journals.
    pub fn open(
        manifest: AnnotationManifest,
        dir: impl Into<PathBuf>,
    ) -> Result<Self, ServiceError> {
        let dir = dir.into();
        for sub in [JOURNAL_DIR, TRACE_DIR] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        let store = SessionStore {
            manifest,
            dir,
            sessions: Mutex::new(HashMap::new()),
        };
        store.recover()?;
        Ok(store)
    }

    pub fn manifest(&self) -> &AnnotationManifest {
        &self.manifest
    }

    pub fn trace_path(&self, session_id: &str) -> PathBuf {
        self.dir.join(TRACE_DIR).join(format!("{session_id}.trace"))
    }

    fn meta_path(&self, session_id: &str) -> PathBuf {
        self.dir.join(TRACE_DIR).join(format!("{session_id}.json"))
    }

    fn journal_path(&self, session_id: &str) -> PathBuf {
        self.dir
            .join(JOURNAL_DIR)
            .join(format!("{session_id}.journal"))
    }

    fn recover(&self) -> Result<(), ServiceError> {
        let traces = self.dir.join(TRACE_DIR);
        let mut map = self.map();
        for entry in fs::read_dir(&traces).map_err(|e| io_err(&traces, e))? {
            let path = entry.map_err(|e| io_err(&traces, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("trace") {
                continue;
            }
            let Some(id) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_string)
            else {
                continue;
            };
            let trace = read_trace::<f64>(&path).map_err(|e| ServiceError::Io(e.to_string()))?;
            let meta = fs::read_to_string(self.meta_path(&id))
                .ok()
                .and_then(|s| serde_json::from_str::<SessionMeta>(&s).ok())
                .unwrap_or_else(|| SessionMeta {
                    session_id: id.clone(),
                    annotator_id: trace.annotator_id().to_string(),
                    video_id: trace.video_id().to_string(),
                    dimension: trace.dimension(),
                    started_at_ms: None,
                });
            let samples = trace
                .samples()
                .iter()
                .map(|&(t, v)| ((t * 1000.0).round() as i64, v))
                .collect();
            let _ = fs::remove_file(self.journal_path(&id));
            map.insert(
                id,
                Arc::new(Mutex::new(Session {
                    meta,
                    state: SessionState::Closed,
                    samples,
                    journal: None,
                })),
            );
        }
        let journals = self.dir.join(JOURNAL_DIR);
        for entry in fs::read_dir(&journals).map_err(|e| io_err(&journals, e))? {
            let path = entry.map_err(|e| io_err(&journals, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("journal") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let mut lines = text.split_inclusive('\n');
            let meta: SessionMeta = match lines.next().map(|l| serde_json::from_str(l.trim_end())) {
                Some(Ok(m)) => m,
                _ => continue,
            };
            let mut valid = text.find('\n').map_or(text.len(), |i| i + 1);
            let mut samples = Vec::new();
            for line in lines {
                // a torn final line (no newline) was never acknowledged
                let parsed = line
                    .strip_suffix('\n')
                    .and_then(|l| l.split_once(','))
                    .and_then(|(t, v)| Some((t.parse::<i64>().ok()?, v.parse::<f64>().ok()?)));
                match parsed {
                    Some(s) => samples.push(s),
                    None => break,
                }
                valid += line.len();
            }
            let journal = OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            journal
                .set_len(valid as u64)
                .map_err(|e| io_err(&path, e))?;
            map.insert(
                meta.session_id.clone(),
                Arc::new(Mutex::new(Session {
                    meta,
                    state: SessionState::Open,
                    samples,
                    journal: Some(journal),
                })),
            );
        }
        Ok(())
    }

    fn map(&self) -> MutexGuard<'_, HashMap<String, Arc<Mutex<Session>>>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.map()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no session {id}")))
    }

    fn with_session<R>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<R, ServiceError>,
    ) -> Result<R, ServiceError> {
        let s = self.session(id)?;
        let mut guard = s.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    }

    pub fn open_session(
        &self,
        annotator_id: &str,
        video_id: &str,
        dimension: Dimension,
    ) -> Result<SessionSummary, ServiceError> {
        if !valid_token(annotator_id) {
            return Err(ServiceError::Validation(format!(
                "annotator id {annotator_id:?} must be nonempty without whitespace, '=', ',' or '/'"
            )));
        }
        if self.manifest.video(video_id).is_none() {
            return Err(ServiceError::NotFound(format!("no video {video_id}")));
        }
        let meta = SessionMeta {
            session_id: uuid::Uuid::new_v4().simple().to_string(),
            annotator_id: annotator_id.to_string(),
            video_id: video_id.to_string(),
            dimension,
            started_at_ms: Some(now_ms()),
        };
        let path = self.journal_path(&meta.session_id);
        let mut header = serde_json::to_string(&meta).expect("meta serializes");
        header.push('\n');
        write_durable(&path, header.as_bytes())?;
        let journal = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let session = Session {
            meta: meta.clone(),
            state: SessionState::Open,
            samples: Vec::new(),
            journal: Some(journal),
        };
        let summary = session.summary();
        self.map()
            .insert(meta.session_id, Arc::new(Mutex::new(session)));
        Ok(summary)
    }

    /// Appends the valid samples in order. Timestamps are seconds of media
    /// time and are rounded to the millisecond.
    pub fn push_samples(
        &self,
        id: &str,
        batch: &[(f64, f64)],
    ) -> Result<PushOutcome, ServiceError> {
        self.with_session(id, |s| {
            if s.state == SessionState::Closed {
                return Err(ServiceError::Conflict(format!("session {id} is closed")));
            }
            let mut last = s.samples.last().map(|&(t, _)| t);
            let mut fresh = Vec::new();
            let mut rejected = Vec::new();
            for (index, &(t, v)) in batch.iter().enumerate() {
                let reason = if !(t.is_finite() && t >= 0.0) {
                    Some(format!(
                        "timestamp {t} is not a non-negative number of seconds"
                    ))
                } else if !(-1.0..=1.0).contains(&v) {
                    Some(format!("value {v} outside [-1, 1]"))
                } else {
                    let ms = (t * 1000.0).round() as i64;
                    if last.is_some_and(|p| ms <= p) {
                        Some(format!("timestamp {} does not increase", seconds(ms)))
                    } else {
                        last = Some(ms);
                        fresh.push((ms, v));
                        None
                    }
                };
                if let Some(reason) = reason {
                    rejected.push(Rejection { index, reason });
                }
            }
            if !fresh.is_empty() {
                let mut text = String::new();
                for (t, v) in &fresh {
                    text.push_str(&format!("{t},{v}\n"));
                }
                let path = self.journal_path(id);
                let journal = s.journal.as_mut().expect("open session has a journal");
                journal
                    .write_all(text.as_bytes())
                    .and_then(|_| journal.sync_data())
                    .map_err(|e| io_err(&path, e))?;
                s.samples.extend_from_slice(&fresh);
            }
            Ok(PushOutcome {
                accepted: fresh.len(),
                rejected,
                total: s.samples.len(),
            })
        })
    }

    /// Writes the trace file and returns its path.
    pub fn close_session(&self, id: &str) -> Result<PathBuf, ServiceError> {
        self.with_session(id, |s| {
            if s.state == SessionState::Closed {
                return Err(ServiceError::Conflict(format!(
                    "session {id} is already closed"
                )));
            }
            if s.samples.is_empty() {
                return Err(ServiceError::Validation(format!(
                    "session {id} has no samples"
                )));
            }
            let text =
                format_trace(&s.trace()?).map_err(|e| ServiceError::Validation(e.to_string()))?;
            let meta = serde_json::to_string_pretty(&s.meta).expect("meta serializes");
            write_durable(&self.meta_path(id), meta.as_bytes())?;
            let path = self.trace_path(id);
            write_durable(&path, text.as_bytes())?;
            s.state = SessionState::Closed;
            s.journal = None;
            let journal = self.journal_path(id);
            fs::remove_file(&journal).map_err(|e| io_err(&journal, e))?;
            Ok(path)
        })
    }

    pub fn summary(&self, id: &str) -> Result<SessionSummary, ServiceError> {
        self.with_session(id, |s| Ok(s.summary()))
    }

    pub fn sessions(&self) -> Vec<SessionSummary> {
        let handles: Vec<_> = self.map().values().cloned().collect();
        let mut out: Vec<_> = handles
            .iter()
            .map(|s| s.lock().unwrap_or_else(|p| p.into_inner()).summary())
            .collect();
        out.sort_by(|a, b| {
            (a.meta.started_at_ms, &a.meta.session_id)
                .cmp(&(b.meta.started_at_ms, &b.meta.session_id))
        });
        out
    }

    /// Stored samples of a closed session, in seconds.
    pub fn review(&self, id: &str) -> Result<(SessionSummary, Vec<(f64, f64)>), ServiceError> {
        self.with_session(id, |s| {
            if s.state == SessionState::Open {
                return Err(ServiceError::Conflict(format!(
                    "session {id} is still open"
                )));
            }
            let samples = s.samples.iter().map(|&(t, v)| (seconds(t), v)).collect();
            Ok((s.summary(), samples))
        })
    }
}
