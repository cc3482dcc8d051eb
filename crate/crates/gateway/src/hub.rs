//! Shared hub state behind the agent server, the HTTP API and the CLI.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use infohub_core::backends::Backends;
use infohub_core::chunking::ChunkingPolicy;
use infohub_core::engine::{Answer, Engine, EngineAction, EngineError, Phase, Role, SessionTable};
use infohub_core::network::{HubIdentity, PeerList, SyncError, SyncOutcome};
use infohub_core::store::{
    ChunkFilter, ChunkId, IngestOptions, KnowledgeChunk, KnowledgeStore, StoreConfig, StoreError,
};
use infohub_core::survey::{RunStatus, SurveyDefinition, SurveyDesk, SurveyError, SurveyRun, SurveyStep};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, HubConfig};
use crate::events::{EventKind, EventLog};

pub const SNAPSHOT_FILE: &str = "store.snap";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SURVEY_RUNS_FILE: &str = "survey_runs.jsonl";
pub const PEERS_FILE: &str = "peers.json";
pub const SURVEYS_DIR: &str = "surveys";

#[derive(Debug, Error)]
pub enum HubError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Survey(#[from] SurveyError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0} not found")]
    NotFound(String),
}

/// Chunk as exposed over the API; embeddings are left out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkView {
    pub id: String,
    pub text: String,
    pub source_session: String,
    pub topic_tags: Vec<String>,
    pub shareable: bool,
    pub origin_hub: String,
    pub version: u64,
    pub created_at: DateTime<Utc>,
}

impl From<&KnowledgeChunk> for ChunkView {
    fn from(c: &KnowledgeChunk) -> Self {
        Self {
            id: c.id.to_string(),
            text: c.text.clone(),
            source_session: c.source_session.clone(),
            topic_tags: c.topic_tags.iter().cloned().collect(),
            shareable: c.shareable,
            origin_hub: c.origin_hub.clone(),
            version: c.version_counter,
            created_at: c.created_at,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PeerStatus {
    pub last_attempt: Option<DateTime<Utc>>,
    pub last_success: Option<DateTime<Utc>>,
    pub last_received: usize,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeerView {
    pub hub_id: String,
    pub address: String,
    pub status: PeerStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurveyProgress {
    pub run_id: String,
    pub status: RunStatus,
    #[serde(flatten)]
    pub step: SurveyStep,
}

/// JSON form of an engine action, shared by the console socket and the log.
pub fn action_json(action: &EngineAction) -> Value {
    match action {
        EngineAction::Ignored | EngineAction::Woke | EngineAction::SleptDueToTimeout => json!({"kind": action.kind()}),
        EngineAction::IngestedChunks(ids) => json!({"kind": action.kind(), "chunk_ids": ids}),
        EngineAction::Answered(answer) => json!({"kind": action.kind(), "answer": answer}),
        EngineAction::Fault(e) => json!({"kind": action.kind(), "error": e.to_string()}),
    }
}

#[derive(Default)]
struct Surveys {
    definitions: BTreeMap<String, Arc<SurveyDefinition>>,
    runs: BTreeMap<String, SurveyRun>,
}

pub struct Hub {
    config: HubConfig,
    store: Arc<KnowledgeStore>,
    engine: Engine,
    sessions: SessionTable,
    events: EventLog,
    peers: PeerList,
    peer_status: Mutex<BTreeMap<String, PeerStatus>>,
    surveys: Mutex<Surveys>,
    desk: SurveyDesk,
    /// Serializes snapshot writes.
    persist_lock: Mutex<()>,
    /// Mutating operations hold this shared; shutdown takes it exclusively
    /// so in-flight steps finish before the final snapshot.
    gate: RwLock<()>,
}

impl Hub {
    pub fn open(config: HubConfig) -> Result<Arc<Self>, HubError> {
        config.validate()?;
        let data_dir = config.data_dir();
        if let Some(dir) = &data_dir {
            std::fs::create_dir_all(dir)?;
        }
        let chunking =
            ChunkingPolicy::new(config.max_sentences_per_chunk, config.overlap_sentences, config.max_chunk_chars)
                .map_err(StoreError::from)?;
        let store = Arc::new(KnowledgeStore::open(&StoreConfig {
            hub_id: config.hub_id.clone(),
            embedder: config.embedder(),
            chunking,
        })?);
        if let Some(snapshot) = data_dir.as_ref().map(|d| d.join(SNAPSHOT_FILE)).filter(|p| p.exists()) {
            store.load(&snapshot)?;
        }
        let engine = Engine::new(Arc::clone(&store), Backends::from_config(&config.backends()), config.engine())?;
        let events = EventLog::open(data_dir.as_ref().map(|d| d.join(EVENTS_FILE)).as_deref())?;

        let peers = PeerList::new(config.peers()?);
        let mut surveys = Surveys::default();
        let mut issued = 0;
        if let Some(dir) = &data_dir {
            let saved = dir.join(PEERS_FILE);
            if saved.exists() {
                let list: Vec<HubIdentity> = serde_json::from_str(&std::fs::read_to_string(&saved)?)
                    .map_err(|e| HubError::BadRequest(format!("{}: {e}", saved.display())))?;
                list.into_iter().for_each(|p| peers.upsert(p));
            }
            let defs = dir.join(SURVEYS_DIR);
            if defs.is_dir() {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(&defs)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "json"))
                    .collect();
                paths.sort();
                for p in paths {
                    let def = load_definition(&p)?;
                    surveys.definitions.insert(def.id.clone(), Arc::new(def));
                }
            }
            let runs = dir.join(SURVEY_RUNS_FILE);
            if runs.exists() {
                issued = std::fs::read_to_string(runs)?.lines().filter(|l| !l.trim().is_empty()).count() as u64;
            }
        }

        Ok(Arc::new(Self {
            config,
            store,
            engine,
            sessions: SessionTable::new(),
            events,
            peers,
            peer_status: Mutex::new(BTreeMap::new()),
            surveys: Mutex::new(surveys),
            desk: SurveyDesk::starting_at(issued),
            persist_lock: Mutex::new(()),
            gate: RwLock::new(()),
        }))
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<KnowledgeStore> {
        &self.store
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn peer_list(&self) -> &PeerList {
        &self.peers
    }

    fn data_path(&self, name: &str) -> Option<PathBuf> {
        self.config.data_dir().map(|d| d.join(name))
    }

    /// Writes the store snapshot when a data directory is configured.
    pub fn persist(&self) -> Result<(), HubError> {
        if let Some(path) = self.data_path(SNAPSHOT_FILE) {
            let _guard = self.persist_lock.lock().unwrap_or_else(|e| e.into_inner());
            self.store.snapshot(&path)?;
        }
        Ok(())
    }

    /// Direct store ingest, as used by the console's teach form and the CLI.
    pub fn teach(&self, text: &str, tags: &[String], share: bool, session: &str) -> Result<Vec<ChunkId>, HubError> {
        let _gate = self.gate.read().unwrap_or_else(|e| e.into_inner());
        if text.trim().is_empty() {
            return Err(HubError::BadRequest("text must not be empty".into()));
        }
        let opts = IngestOptions::session(session).shared(share).tagged(tags.iter().cloned());
        let ids = self.store.ingest(text, &opts).map_err(|e| match e {
            StoreError::EmptyText => HubError::BadRequest("text has nothing that can be stored".into()),
            other => other.into(),
        })?;
        self.events.record(session, EventKind::Ingest, json!({"chunk_ids": ids, "shareable": share, "source": "api"}));
        self.persist()?;
        Ok(ids)
    }

    /// Without a session this is the engine's one-shot answer. With one, the
    /// question joins that visitor session's history; being addressed
    /// directly, it needs no wake phrase.
    pub fn ask(&self, question: &str, session: Option<&str>) -> Result<Answer, HubError> {
        if question.trim().is_empty() {
            return Err(HubError::BadRequest("question must not be empty".into()));
        }
        let log_id = session.unwrap_or("api");
        self.events.record(log_id, EventKind::Utterance, json!({"text": question}));
        let answer = match session {
            None => self.engine.ask(question),
            Some(id) => {
                let now = Utc::now();
                let handle = self.sessions.get_or_create(id, || self.engine.new_session(id, Role::Visitor, now));
                let mut s = handle.lock().unwrap_or_else(|e| e.into_inner());
                if s.role() != Role::Visitor {
                    return Err(HubError::BadRequest(format!("session {id} is not a visitor session")));
                }
                s.wake(now);
                self.engine.answer_question(&mut s, question, now)
            }
        };
        match answer {
            Ok(a) => {
                self.events.record(log_id, EventKind::Answer, json!(a));
                Ok(a)
            }
            Err(EngineError::EmptyText) => Err(HubError::BadRequest("question has no usable words".into())),
            Err(e) => {
                self.events.record(log_id, EventKind::Error, json!({"error": e.to_string()}));
                Err(e.into())
            }
        }
    }

    /// Creates (or resumes) a session. A resumed id must keep its role.
    pub fn open_session(&self, resume: Option<&str>, role: Role, share: bool) -> Result<String, HubError> {
        let id = match resume {
            Some(id) if !id.trim().is_empty() => id.to_string(),
            _ => SessionTable::fresh_id(match role {
                Role::Presenter => "presenter",
                Role::Visitor => "visitor",
            }),
        };
        let handle = self.sessions.get_or_create(&id, || self.engine.new_session(id.clone(), role, Utc::now()));
        let mut s = handle.lock().unwrap_or_else(|e| e.into_inner());
        if s.role() != role {
            return Err(HubError::BadRequest(format!("session {id} exists with another role")));
        }
        s.share_taught = share;
        Ok(id)
    }

    /// Id of the answering session paired with a presenter session.
    pub fn explanation_session(&self, presenter_id: &str) -> String {
        let id = format!("{presenter_id}/explain");
        let handle =
            self.sessions.get_or_create(&id, || self.engine.new_session(id.clone(), Role::Visitor, Utc::now()));
        handle.lock().unwrap_or_else(|e| e.into_inner()).wake(Utc::now());
        id
    }

    pub fn session_phase(&self, id: &str) -> Option<Phase> {
        self.sessions.get(id).map(|s| s.lock().unwrap_or_else(|e| e.into_inner()).phase())
    }

    /// One engine step with its events logged. Unknown sessions are created
    /// as visitors.
    pub fn step(&self, session_id: &str, transcript: &str) -> Vec<EngineAction> {
        let _gate = self.gate.read().unwrap_or_else(|e| e.into_inner());
        let now = Utc::now();
        let handle =
            self.sessions.get_or_create(session_id, || self.engine.new_session(session_id, Role::Visitor, now));
        let mut s = handle.lock().unwrap_or_else(|e| e.into_inner());
        self.events.record(session_id, EventKind::Utterance, json!({"text": transcript, "role": s.role()}));
        let actions = self.engine.step(&mut s, transcript, now);
        drop(s);
        let mut ingested = false;
        for action in &actions {
            let kind = match action {
                EngineAction::Ignored => continue,
                EngineAction::Woke => EventKind::Wake,
                EngineAction::SleptDueToTimeout => EventKind::Sleep,
                EngineAction::IngestedChunks(_) => {
                    ingested = true;
                    EventKind::Ingest
                }
                EngineAction::Answered(_) => EventKind::Answer,
                EngineAction::Fault(_) => EventKind::Error,
            };
            self.events.record(session_id, kind, action_json(action));
        }
        if ingested {
            if let Err(e) = self.persist() {
                log::error!("snapshot failed: {e}");
            }
        }
        actions
    }

    pub fn chunks(&self, filter: &ChunkFilter) -> Result<Vec<ChunkView>, HubError> {
        Ok(self.store.chunks(Some(filter))?.iter().map(|c| ChunkView::from(&**c)).collect())
    }

    pub fn chunk(&self, id: &str) -> Result<ChunkView, HubError> {
        let cid = ChunkId::parse(id).ok_or_else(|| HubError::NotFound(format!("chunk {id}")))?;
        self.store.get(&cid).map(|c| ChunkView::from(&*c)).ok_or_else(|| HubError::NotFound(format!("chunk {id}")))
    }

    pub fn set_shareable(&self, id: &str, shareable: bool) -> Result<ChunkView, HubError> {
        let cid = ChunkId::parse(id).ok_or_else(|| HubError::NotFound(format!("chunk {id}")))?;
        self.store.set_shareable(&cid, shareable).map_err(|e| match e {
            StoreError::NotFound(_) => HubError::NotFound(format!("chunk {id}")),
            other => other.into(),
        })?;
        self.persist()?;
        self.chunk(id)
    }

    pub fn forget(&self, session: &str) -> Result<usize, HubError> {
        let removed = self.store.forget(session)?;
        self.events.record(session, EventKind::Ingest, json!({"forgotten": removed}));
        self.persist()?;
        Ok(removed)
    }

    pub fn peers(&self) -> Vec<PeerView> {
        let status = self.peer_status.lock().unwrap_or_else(|e| e.into_inner());
        self.peers
            .snapshot()
            .into_iter()
            .map(|p| PeerView {
                status: status.get(&p.hub_id).cloned().unwrap_or_default(),
                hub_id: p.hub_id,
                address: p.address,
            })
            .collect()
    }

    /// Adds or updates a peer and saves the list next to the snapshot.
    pub fn add_peer(&self, peer: HubIdentity) -> Result<(), HubError> {
        if peer.hub_id.trim().is_empty() || peer.address.trim().is_empty() {
            return Err(HubError::BadRequest("hub_id and address are required".into()));
        }
        self.peers.upsert(peer);
        if let Some(path) = self.data_path(PEERS_FILE) {
            let list = self.peers.snapshot();
            std::fs::write(path, serde_json::to_string_pretty(&list).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }

    /// Bookkeeping after a gossip round with `peer`.
    pub fn record_sync(&self, peer: &HubIdentity, result: &Result<SyncOutcome, SyncError>) {
        let now = Utc::now();
        {
            let mut status = self.peer_status.lock().unwrap_or_else(|e| e.into_inner());
            let entry = status.entry(peer.hub_id.clone()).or_default();
            entry.last_attempt = Some(now);
            match result {
                Ok(o) => {
                    entry.last_success = Some(now);
                    entry.last_received = o.received;
                    entry.last_error = None;
                }
                Err(e) => entry.last_error = Some(e.to_string()),
            }
        }
        let detail = match result {
            Ok(o) => {
                json!({"peer": peer.hub_id, "ok": true, "received": o.received, "pushed": o.pushed, "rejected": o.rejected})
            }
            Err(e) => json!({"peer": peer.hub_id, "ok": false, "error": e.to_string()}),
        };
        self.events.record(&format!("sync:{}", peer.hub_id), EventKind::Sync, detail);
        if matches!(result, Ok(o) if o.received > 0) {
            if let Err(e) = self.persist() {
                log::error!("snapshot failed: {e}");
            }
        }
    }

    pub fn register_survey(&self, def: SurveyDefinition) -> Result<(), HubError> {
        def.validate()?;
        if def.id.trim().is_empty() {
            return Err(HubError::BadRequest("survey id must not be empty".into()));
        }
        self.surveys.lock().unwrap_or_else(|e| e.into_inner()).definitions.insert(def.id.clone(), Arc::new(def));
        Ok(())
    }

    pub fn survey_definitions(&self) -> Vec<Arc<SurveyDefinition>> {
        self.surveys.lock().unwrap_or_else(|e| e.into_inner()).definitions.values().cloned().collect()
    }

    pub fn start_survey(&self, survey_id: &str, session: &str) -> Result<SurveyProgress, HubError> {
        let mut surveys = self.surveys.lock().unwrap_or_else(|e| e.into_inner());
        let def = surveys
            .definitions
            .get(survey_id)
            .cloned()
            .ok_or_else(|| HubError::NotFound(format!("survey {survey_id}")))?;
        let (run, step) = self.desk.start(def, session);
        let progress = SurveyProgress { run_id: run.run_id().to_string(), status: run.status(), step };
        self.events.record(
            session,
            EventKind::Survey,
            json!({"run_id": progress.run_id, "event": "start", "survey_id": survey_id}),
        );
        if run.status() != RunStatus::InProgress {
            self.finish_run(&run)?;
        }
        surveys.runs.insert(progress.run_id.clone(), run);
        Ok(progress)
    }

    pub fn submit_survey(&self, run_id: &str, utterance: &str) -> Result<SurveyProgress, HubError> {
        let mut surveys = self.surveys.lock().unwrap_or_else(|e| e.into_inner());
        let run = surveys.runs.get_mut(run_id).ok_or_else(|| HubError::NotFound(format!("survey run {run_id}")))?;
        let step = run.submit(utterance, Utc::now())?;
        let progress = SurveyProgress { run_id: run_id.to_string(), status: run.status(), step };
        self.events.record(
            run.session_id(),
            EventKind::Survey,
            json!({"run_id": run_id, "event": "answer", "raw": utterance, "next": progress.step}),
        );
        if run.status() != RunStatus::InProgress {
            let run = run.clone();
            self.finish_run(&run)?;
        }
        Ok(progress)
    }

    pub fn abort_survey(&self, run_id: &str) -> Result<(), HubError> {
        let mut surveys = self.surveys.lock().unwrap_or_else(|e| e.into_inner());
        let run = surveys.runs.get_mut(run_id).ok_or_else(|| HubError::NotFound(format!("survey run {run_id}")))?;
        run.abort()?;
        let run = run.clone();
        self.finish_run(&run)
    }

    fn finish_run(&self, run: &SurveyRun) -> Result<(), HubError> {
        self.events.record(
            run.session_id(),
            EventKind::Survey,
            json!({"run_id": run.run_id(), "event": "finish", "status": run.status()}),
        );
        if let Some(path) = self.data_path(SURVEY_RUNS_FILE) {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", run.to_json_line())?;
        }
        Ok(())
    }

    /// Finished runs from disk, then runs of this process still in progress.
    /// Without a data directory, every run of this process.
    pub fn export_surveys(&self) -> Result<String, HubError> {
        let surveys = self.surveys.lock().unwrap_or_else(|e| e.into_inner());
        let mut out = String::new();
        match self.data_path(SURVEY_RUNS_FILE) {
            Some(path) => {
                if path.exists() {
                    out.push_str(&std::fs::read_to_string(path)?);
                }
                for run in surveys.runs.values().filter(|r| r.status() == RunStatus::InProgress) {
                    out.push_str(&run.to_json_line());
                    out.push('\n');
                }
            }
            None => {
                for run in surveys.runs.values() {
                    out.push_str(&run.to_json_line());
                    out.push('\n');
                }
            }
        }
        Ok(out)
    }

    /// Waits for in-flight steps, writes the final snapshot and closes the
    /// store.
    pub fn shutdown(&self) -> Result<(), HubError> {
        let _gate = self.gate.write().unwrap_or_else(|e| e.into_inner());
        self.persist()?;
        self.store.close();
        Ok(())
    }
}

pub fn load_definition(path: &std::path::Path) -> Result<SurveyDefinition, HubError> {
    let text = std::fs::read_to_string(path)?;
    let def: SurveyDefinition =
        serde_json::from_str(&text).map_err(|e| HubError::BadRequest(format!("{}: {e}", path.display())))?;
    def.validate()?;
    Ok(def)
}
