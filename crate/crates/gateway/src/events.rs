//! Append-only interaction log, written as JSON Lines and fanned out to
//! console subscribers.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Utterance,
    Answer,
    Wake,
    Sleep,
    Ingest,
    Survey,
    Sync,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    #[serde(with = "ts_format")]
    pub ts: DateTime<Utc>,
    pub session_id: String,
    pub kind: EventKind,
    pub detail: Value,
}

mod ts_format {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::Micros, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw).map(|t| t.with_timezone(&Utc)).map_err(serde::de::Error::custom)
    }
}

struct Inner {
    file: Option<File>,
    /// Kept only when there is no backing file.
    memory: Vec<String>,
    last_ts: HashMap<String, DateTime<Utc>>,
}

pub struct EventLog {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
    tx: broadcast::Sender<EventRecord>,
}

impl EventLog {
    /// Appends to `path`, creating it if needed. `None` keeps the log in memory.
    pub fn open(path: Option<&Path>) -> io::Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                Some(OpenOptions::new().create(true).append(true).open(p)?)
            }
            None => None,
        };
        let (tx, _) = broadcast::channel(256);
        Ok(Self {
            path: path.map(Path::to_path_buf),
            inner: Mutex::new(Inner { file, memory: Vec::new(), last_ts: HashMap::new() }),
            tx,
        })
    }

    pub fn subscribe(&self) -> broadcast::Receiver<EventRecord> {
        self.tx.subscribe()
    }

    /// Appends one record. Timestamps never go backwards within a session:
    /// a clock step back is clamped to the session's previous timestamp.
    pub fn append(
        &self,
        session_id: &str,
        kind: EventKind,
        detail: Value,
        now: DateTime<Utc>,
    ) -> io::Result<EventRecord> {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let ts = match inner.last_ts.get(session_id) {
            Some(prev) if *prev > now => *prev,
            _ => now,
        };
        let record = EventRecord { ts, session_id: session_id.to_string(), kind, detail };
        let line = serde_json::to_string(&record).map_err(io::Error::other)?;
        match inner.file.as_mut() {
            Some(f) => {
                f.write_all(line.as_bytes())?;
                f.write_all(b"\n")?;
                f.flush()?;
            }
            None => inner.memory.push(line),
        }
        inner.last_ts.insert(session_id.to_string(), ts);
        drop(inner);
        let _ = self.tx.send(record.clone());
        Ok(record)
    }

    /// Logs and swallows I/O failures; the interaction itself must not fail
    /// because the log did.
    pub fn record(&self, session_id: &str, kind: EventKind, detail: Value) {
        if let Err(e) = self.append(session_id, kind, detail, Utc::now()) {
            log::error!("event log append failed: {e}");
        }
    }

    /// The whole log as JSON Lines.
    pub fn export(&self) -> io::Result<String> {
        let inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        match &self.path {
            Some(p) => {
                drop(inner);
                std::fs::read_to_string(p)
            }
            None => Ok(inner.memory.iter().map(|l| format!("{l}\n")).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use serde_json::json;

    #[test]
    fn timestamps_monotone_per_session() {
        let log = EventLog::open(None).unwrap();
        let t = |s: i64| Utc.timestamp_opt(1_700_000_000 + s, 0).unwrap();
        log.append("a", EventKind::Utterance, json!({}), t(10)).unwrap();
        let back = log.append("a", EventKind::Answer, json!({}), t(5)).unwrap();
        assert_eq!(back.ts, t(10));
        let other = log.append("b", EventKind::Wake, json!({}), t(5)).unwrap();
        assert_eq!(other.ts, t(5));
    }

    #[test]
    fn file_is_append_only_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs/events.jsonl");
        let mut sizes = vec![];
        {
            let log = EventLog::open(Some(&path)).unwrap();
            for i in 0..3 {
                log.record("s", EventKind::Utterance, json!({"text": format!("line {i}")}));
                sizes.push(std::fs::metadata(&path).unwrap().len());
            }
        }
        let log = EventLog::open(Some(&path)).unwrap();
        log.record("s", EventKind::Sync, json!({"received": 1}));
        sizes.push(std::fs::metadata(&path).unwrap().len());
        assert!(sizes.windows(2).all(|w| w[1] > w[0]));
        let text = log.export().unwrap();
        let records: Vec<EventRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 4);
        assert_eq!(records[3].kind, EventKind::Sync);
    }

    #[tokio::test]
    async fn subscribers_see_appends() {
        let log = EventLog::open(None).unwrap();
        let mut rx = log.subscribe();
        log.record("s", EventKind::Ingest, json!({"chunks": 2}));
        let got = rx.recv().await.unwrap();
        assert_eq!(got.kind, EventKind::Ingest);
        assert_eq!(got.detail["chunks"], 2);
    }
}
