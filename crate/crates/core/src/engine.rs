//! The conversational core.
//!
//! Presenter sessions are always in the input phase: everything they say
//! is chunked and stored. Visitor sessions are in the explanation phase and
//! gated by a wake phrase: while asleep, utterances are ignored unless they
//! contain a wake phrase; once awake, every utterance is answered from the
//! store until the session has been idle longer than the wake timeout.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, TimeDelta, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, Backends, ContextBlock, GenerationRequest, SpeakerRole, DEFAULT_MAX_REPLY_CHARS, FALLBACK_REPLY,
};
use crate::embedder::{normalize_text, EmbedError};
use crate::store::{ChunkId, IngestOptions, KnowledgeStore, StoreError};

pub const DEFAULT_WAKE_PHRASE: &str = "hey suzume chan";
pub const DEFAULT_SYSTEM_INSTRUCTIONS: &str = "You are Suzume-chan, a small, soft companion who explains a \
presenter's research to visitors. Answer warmly and briefly, using only the provided context. If the context \
does not cover the question, say that you have not been taught about it yet.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("nothing to process after normalization")]
    EmptyText,
    #[error("{operation} is not allowed in a {role:?} session")]
    PhaseViolation { operation: &'static str, role: Role },
    #[error("session is asleep")]
    NotAwake,
    #[error("embedding failed: {0}")]
    Embed(EmbedError),
    #[error("backend failed: {0}")]
    Backend(BackendError),
    #[error("store failed: {0}")]
    Store(String),
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::EmptyText | StoreError::Embed(EmbedError::EmptyText) => EngineError::EmptyText,
            StoreError::Embed(inner) => EngineError::Embed(inner),
            other => EngineError::Store(other.to_string()),
        }
    }
}

impl From<EmbedError> for EngineError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::EmptyText | EmbedError::DegenerateVector => EngineError::EmptyText,
            other => EngineError::Embed(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Presenter,
    Visitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Input,
    Explanation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WakeState {
    Asleep,
    Awake,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Turn {
    pub speaker: SpeakerRole,
    pub utterance: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    id: String,
    role: Role,
    wake_state: WakeState,
    history: VecDeque<Turn>,
    capacity: usize,
    last_activity: DateTime<Utc>,
    /// Consent applied to everything taught in this session.
    pub share_taught: bool,
    pub tags: BTreeSet<String>,
}

impl Session {
    pub fn new(id: impl Into<String>, role: Role, history_turns: usize, now: DateTime<Utc>) -> Self {
        let wake_state = match role {
            Role::Presenter => WakeState::Awake,
            Role::Visitor => WakeState::Asleep,
        };
        Self {
            id: id.into(),
            role,
            wake_state,
            history: VecDeque::with_capacity(history_turns),
            capacity: history_turns.max(1),
            last_activity: now,
            share_taught: false,
            tags: BTreeSet::new(),
        }
    }

    pub fn presenter(id: impl Into<String>, history_turns: usize, now: DateTime<Utc>) -> Self {
        Self::new(id, Role::Presenter, history_turns, now)
    }

    pub fn visitor(id: impl Into<String>, history_turns: usize, now: DateTime<Utc>) -> Self {
        Self::new(id, Role::Visitor, history_turns, now)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        match self.role {
            Role::Presenter => Phase::Input,
            Role::Visitor => Phase::Explanation,
        }
    }

    pub fn wake_state(&self) -> WakeState {
        self.wake_state
    }

    pub fn last_activity(&self) -> DateTime<Utc> {
        self.last_activity
    }

    pub fn history(&self) -> impl ExactSizeIterator<Item = &Turn> {
        self.history.iter()
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Forces a visitor session awake, e.g. for console or CLI questions
    /// that are explicitly addressed to the hub.
    pub fn wake(&mut self, now: DateTime<Utc>) {
        self.wake_state = WakeState::Awake;
        self.touch(now);
    }

    fn touch(&mut self, now: DateTime<Utc>) {
        if now > self.last_activity {
            self.last_activity = now;
        }
    }

    fn push(&mut self, speaker: SpeakerRole, utterance: &str, at: DateTime<Utc>) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(Turn { speaker, utterance: utterance.to_string(), at });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Citation {
    pub chunk_id: ChunkId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    pub text: String,
    pub citations: Vec<Citation>,
    pub below_threshold: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EngineAction {
    Ignored,
    Woke,
    IngestedChunks(Vec<ChunkId>),
    Answered(Answer),
    SleptDueToTimeout,
    Fault(EngineError),
}

impl EngineAction {
    pub fn kind(&self) -> &'static str {
        match self {
            EngineAction::Ignored => "ignored",
            EngineAction::Woke => "woke",
            EngineAction::IngestedChunks(_) => "ingested",
            EngineAction::Answered(_) => "answered",
            EngineAction::SleptDueToTimeout => "slept",
            EngineAction::Fault(_) => "fault",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub wake_phrases: Vec<String>,
    pub wake_timeout: Duration,
    pub top_k: usize,
    pub min_similarity: f64,
    pub fallback_text: String,
    pub history_turns: usize,
    pub system_instructions: String,
    pub max_reply_chars: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            wake_phrases: vec![DEFAULT_WAKE_PHRASE.to_string()],
            wake_timeout: Duration::from_secs(60),
            top_k: 4,
            min_similarity: 0.15,
            fallback_text: FALLBACK_REPLY.to_string(),
            history_turns: 12,
            system_instructions: DEFAULT_SYSTEM_INSTRUCTIONS.to_string(),
            max_reply_chars: DEFAULT_MAX_REPLY_CHARS,
        }
    }
}

impl EngineConfig {
    /// Normalizes wake phrases and checks ranges.
    pub fn validated(mut self) -> Result<Self, EngineError> {
        let mut phrases: Vec<String> =
            self.wake_phrases.iter().map(|p| normalize_text(p)).filter(|p| !p.is_empty()).collect();
        phrases.sort();
        phrases.dedup();
        if phrases.is_empty() {
            return Err(EngineError::InvalidConfig("at least one non-empty wake phrase is required".into()));
        }
        self.wake_phrases = phrases;
        if !(0.0..1.0).contains(&self.min_similarity) {
            return Err(EngineError::InvalidConfig("min_similarity must be in [0, 1)".into()));
        }
        if self.top_k == 0 || self.history_turns == 0 || self.max_reply_chars == 0 {
            return Err(EngineError::InvalidConfig("top_k, history_turns and max_reply_chars must be positive".into()));
        }
        Ok(self)
    }
}

/// Finds the earliest wake phrase in `transcript` (longest phrase wins on
/// a tie) and returns the normalized words that follow it.
pub fn wake_remainder(transcript: &str, wake_phrases: &[String]) -> Option<String> {
    let normalized = normalize_text(transcript);
    let words: Vec<&str> = normalized.split(' ').filter(|w| !w.is_empty()).collect();
    let mut best: Option<(usize, usize)> = None;
    for phrase in wake_phrases {
        let phrase = normalize_text(phrase);
        let pattern: Vec<&str> = phrase.split(' ').filter(|w| !w.is_empty()).collect();
        if pattern.is_empty() || pattern.len() > words.len() {
            continue;
        }
        if let Some(start) = words.windows(pattern.len()).position(|w| w == pattern.as_slice()) {
            let end = start + pattern.len();
            best = match best {
                Some((s, e)) if s < start || (s == start && e >= end) => Some((s, e)),
                _ => Some((start, end)),
            };
        }
    }
    best.map(|(_, end)| words[end..].join(" "))
}

/// True iff the normalized transcript contains a wake phrase as a
/// contiguous word sequence.
///
/// ```
/// use infohub_core::engine::{detect_wake, EngineConfig};
/// let config = EngineConfig::default();
/// assert!(detect_wake("Hey, Suzume-chan! What is this?", &config));
/// assert!(!detect_wake("hello there", &config));
/// ```
pub fn detect_wake(transcript: &str, config: &EngineConfig) -> bool {
    wake_remainder(transcript, &config.wake_phrases).is_some()
}

pub struct Engine {
    store: Arc<KnowledgeStore>,
    backends: Backends,
    config: EngineConfig,
}

impl Engine {
    pub fn new(store: Arc<KnowledgeStore>, backends: Backends, config: EngineConfig) -> Result<Self, EngineError> {
        Ok(Self { store, backends, config: config.validated()? })
    }

    pub fn store(&self) -> &Arc<KnowledgeStore> {
        &self.store
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn new_session(&self, id: impl Into<String>, role: Role, now: DateTime<Utc>) -> Session {
        Session::new(id, role, self.config.history_turns, now)
    }

    /// Processes one transcript. Usually yields a single action; a timeout
    /// or a wake phrase followed by a question yields two.
    pub fn step(&self, session: &mut Session, transcript: &str, now: DateTime<Utc>) -> Vec<EngineAction> {
        let mut actions = Vec::new();
        if session.role == Role::Presenter {
            match self.ingest_explanation(session, transcript, now) {
                Ok(ids) => actions.push(EngineAction::IngestedChunks(ids)),
                Err(e) => {
                    session.push(SpeakerRole::Presenter, transcript, now);
                    session.touch(now);
                    actions.push(EngineAction::Fault(e));
                }
            }
            return actions;
        }

        if session.wake_state == WakeState::Awake && self.timed_out(session, now) {
            session.wake_state = WakeState::Asleep;
            actions.push(EngineAction::SleptDueToTimeout);
        }

        let remainder = wake_remainder(transcript, &self.config.wake_phrases);
        let question = match (session.wake_state, remainder) {
            (WakeState::Asleep, None) => {
                actions.push(EngineAction::Ignored);
                return actions;
            }
            (WakeState::Asleep, Some(rest)) => {
                session.wake_state = WakeState::Awake;
                actions.push(EngineAction::Woke);
                rest
            }
            // Repeating the wake phrase while awake only strips it.
            (WakeState::Awake, Some(rest)) => {
                if rest.is_empty() {
                    actions.push(EngineAction::Woke);
                }
                rest
            }
            (WakeState::Awake, None) => transcript.to_string(),
        };

        if question.trim().is_empty() {
            session.push(SpeakerRole::Visitor, transcript, now);
            session.touch(now);
            return actions;
        }
        match self.answer_question(session, &question, now) {
            Ok(answer) => actions.push(EngineAction::Answered(answer)),
            Err(e) => {
                session.push(SpeakerRole::Visitor, transcript, now);
                session.touch(now);
                actions.push(EngineAction::Fault(e));
            }
        }
        actions
    }

    fn timed_out(&self, session: &Session, now: DateTime<Utc>) -> bool {
        let timeout = TimeDelta::from_std(self.config.wake_timeout).unwrap_or(TimeDelta::MAX);
        now.signed_duration_since(session.last_activity) > timeout
    }

    /// Stores a presenter's explanation under the session's consent setting.
    pub fn ingest_explanation(
        &self,
        session: &mut Session,
        transcript: &str,
        now: DateTime<Utc>,
    ) -> Result<Vec<ChunkId>, EngineError> {
        if session.phase() != Phase::Input {
            return Err(EngineError::PhaseViolation { operation: "ingest_explanation", role: session.role });
        }
        let opts = IngestOptions {
            source_session: session.id.clone(),
            tags: session.tags.clone(),
            shareable: session.share_taught,
        };
        let ids = self.store.ingest(transcript, &opts)?;
        session.push(SpeakerRole::Presenter, transcript, now);
        session.touch(now);
        Ok(ids)
    }

    /// Retrieves, builds the prompt and generates an answer.
    pub fn answer_question(
        &self,
        session: &mut Session,
        question: &str,
        now: DateTime<Utc>,
    ) -> Result<Answer, EngineError> {
        if session.phase() != Phase::Explanation {
            return Err(EngineError::PhaseViolation { operation: "answer_question", role: session.role });
        }
        if session.wake_state != WakeState::Awake {
            return Err(EngineError::NotAwake);
        }
        let answer =
            self.answer(session.history.iter().map(|t| (t.speaker, t.utterance.clone())).collect(), question)?;
        session.push(SpeakerRole::Visitor, question, now);
        session.push(SpeakerRole::Agent, &answer.text, now);
        session.touch(now);
        Ok(answer)
    }

    fn answer(&self, history: Vec<(SpeakerRole, String)>, question: &str) -> Result<Answer, EngineError> {
        let query = self.store.embedder().embed(question)?;
        let hits: Vec<_> = self
            .store
            .search_chunks(&query, self.config.top_k, None)?
            .into_iter()
            .filter(|(r, _)| r.score >= self.config.min_similarity)
            .collect();
        if hits.is_empty() {
            return Ok(Answer {
                text: self.config.fallback_text.clone(),
                citations: Vec::new(),
                below_threshold: true,
            });
        }
        let request = GenerationRequest {
            system_instructions: self.config.system_instructions.clone(),
            context_blocks: hits
                .iter()
                .map(|(r, c)| ContextBlock { chunk_id: r.chunk_id.clone(), text: c.text.clone() })
                .collect(),
            history,
            question: question.to_string(),
            max_reply_chars: self.config.max_reply_chars,
        };
        let reply = self.backends.generate(&request).map_err(EngineError::Backend)?;
        let citations = reply
            .cited_chunk_ids
            .iter()
            .filter_map(|id| hits.iter().find(|(r, _)| &r.chunk_id == id))
            .map(|(r, _)| Citation { chunk_id: r.chunk_id.clone(), score: r.score })
            .collect();
        Ok(Answer { text: reply.text, citations, below_threshold: false })
    }

    /// One-shot question with no session history and no wake gating.
    pub fn ask(&self, question: &str) -> Result<Answer, EngineError> {
        self.answer(Vec::new(), question)
    }
}

/// Live sessions keyed by id, each behind its own lock so steps of one
/// session are serialized while distinct sessions run concurrently.
#[derive(Default)]
pub struct SessionTable {
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh_id(prefix: &str) -> String {
        format!("{prefix}-{:016x}", rand::thread_rng().gen::<u64>())
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    pub fn insert(&self, session: Session) -> Arc<Mutex<Session>> {
        let id = session.id.clone();
        let handle = Arc::new(Mutex::new(session));
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).insert(id, Arc::clone(&handle));
        handle
    }

    /// Returns the session `id` if it exists with the same role, otherwise
    /// creates it.
    pub fn get_or_create(&self, id: &str, create: impl FnOnce() -> Session) -> Arc<Mutex<Session>> {
        let mut map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        Arc::clone(map.entry(id.to_string()).or_insert_with(|| Arc::new(Mutex::new(create()))))
    }

    pub fn remove(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).remove(id)
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
