//! Flat TOML configuration.
//!
//! Every key is optional. Unknown keys are rejected so typos surface early.
//!
//! ```toml
//! hub_id = "hub-lab"
//! data_dir = "./hub-data"
//! http_bind = "127.0.0.1:8080"
//! agent_bind = "127.0.0.1:7070"
//! sync_bind = "127.0.0.1:7171"
//! embedder_dimension = 256
//! embedder_endpoint = ""            # empty: built-in reference embedder
//! wake_phrases = ["hey suzume chan"]
//! wake_timeout_secs = 60
//! top_k = 4
//! min_similarity = 0.15
//! stt_endpoint = ""
//! llm_endpoint = ""
//! tts_endpoint = ""
//! peers = ["hub-b@192.168.0.12:7171"]
//! gossip_period_secs = 30
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use infohub_core::backends::BackendsConfig;
use infohub_core::embedder::{EmbedderBackend, EmbedderConfig};
use infohub_core::engine::EngineConfig;
use infohub_core::network::HubIdentity;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_ENV: &str = "HUB_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HubConfig {
    pub hub_id: String,
    /// Snapshot, event log, survey runs and peer list live here. Empty keeps
    /// everything in memory.
    pub data_dir: String,
    pub http_bind: String,
    pub agent_bind: String,
    pub sync_bind: String,
    /// Directory of built console assets served at `/`.
    pub static_dir: String,

    pub embedder_dimension: usize,
    pub embedder_endpoint: String,
    pub embedder_timeout_ms: u64,
    pub max_sentences_per_chunk: usize,
    pub overlap_sentences: usize,
    pub max_chunk_chars: usize,

    pub wake_phrases: Vec<String>,
    pub wake_timeout_secs: u64,
    pub top_k: usize,
    pub min_similarity: f64,
    pub history_turns: usize,
    pub max_reply_chars: usize,
    pub fallback_text: String,

    pub stt_endpoint: String,
    pub llm_endpoint: String,
    pub tts_endpoint: String,
    pub backend_timeout_ms: u64,
    pub fallback_to_stub: bool,
    /// Send REPLY_AUDIO after each REPLY_TEXT.
    pub synthesize_replies: bool,

    /// `hub_id@host:port` entries.
    pub peers: Vec<String>,
    pub gossip_period_secs: u64,
    pub sync_timeout_ms: u64,
}

impl Default for HubConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            hub_id: "hub-local".into(),
            data_dir: "hub-data".into(),
            http_bind: "127.0.0.1:8080".into(),
            agent_bind: "127.0.0.1:7070".into(),
            sync_bind: "127.0.0.1:7171".into(),
            static_dir: String::new(),
            embedder_dimension: infohub_core::embedder::DEFAULT_DIMENSION,
            embedder_endpoint: String::new(),
            embedder_timeout_ms: 10_000,
            max_sentences_per_chunk: 3,
            overlap_sentences: 1,
            max_chunk_chars: 480,
            wake_phrases: engine.wake_phrases,
            wake_timeout_secs: engine.wake_timeout.as_secs(),
            top_k: engine.top_k,
            min_similarity: engine.min_similarity,
            history_turns: engine.history_turns,
            max_reply_chars: engine.max_reply_chars,
            fallback_text: engine.fallback_text,
            stt_endpoint: String::new(),
            llm_endpoint: String::new(),
            tts_endpoint: String::new(),
            backend_timeout_ms: 10_000,
            fallback_to_stub: true,
            synthesize_replies: false,
            peers: Vec::new(),
            gossip_period_secs: 30,
            sync_timeout_ms: 5_000,
        }
    }
}

fn non_empty(s: &str) -> Option<String> {
    let s = s.trim();
    (!s.is_empty()).then(|| s.to_string())
}

/// Parses `hub_id@address`.
pub fn parse_peer(entry: &str) -> Result<HubIdentity, ConfigError> {
    match entry.split_once('@') {
        Some((id, addr)) if !id.trim().is_empty() && !addr.trim().is_empty() => {
            Ok(HubIdentity::new(id.trim(), addr.trim()))
        }
        _ => Err(ConfigError::Invalid(format!("peer {entry:?} is not of the form hub_id@host:port"))),
    }
}

impl HubConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    /// `explicit` (from `--config`) wins, then `HUB_CONFIG`, then defaults.
    pub fn resolve(explicit: Option<&Path>, env_value: Option<&str>) -> Result<Self, ConfigError> {
        match explicit.map(Path::to_path_buf).or_else(|| env_value.and_then(non_empty).map(PathBuf::from)) {
            Some(path) => Self::from_file(&path),
            None => Ok(Self::default()),
        }
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        non_empty(&self.data_dir).map(PathBuf::from)
    }

    pub fn embedder(&self) -> EmbedderConfig {
        let remote = non_empty(&self.embedder_endpoint);
        EmbedderConfig {
            dimension: self.embedder_dimension,
            backend: if remote.is_some() { EmbedderBackend::Remote } else { EmbedderBackend::Reference },
            remote_endpoint: remote,
            timeout_ms: self.embedder_timeout_ms,
        }
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            wake_phrases: self.wake_phrases.clone(),
            wake_timeout: Duration::from_secs(self.wake_timeout_secs),
            top_k: self.top_k,
            min_similarity: self.min_similarity,
            fallback_text: self.fallback_text.clone(),
            history_turns: self.history_turns,
            max_reply_chars: self.max_reply_chars,
            ..EngineConfig::default()
        }
    }

    pub fn backends(&self) -> BackendsConfig {
        BackendsConfig {
            stt_endpoint: non_empty(&self.stt_endpoint),
            llm_endpoint: non_empty(&self.llm_endpoint),
            tts_endpoint: non_empty(&self.tts_endpoint),
            timeout_ms: self.backend_timeout_ms,
            fallback_to_stub: self.fallback_to_stub,
        }
    }

    pub fn peers(&self) -> Result<Vec<HubIdentity>, ConfigError> {
        self.peers.iter().map(|p| parse_peer(p)).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.hub_id.trim().is_empty() {
            return Err(ConfigError::Invalid("hub_id must not be empty".into()));
        }
        self.embedder().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.engine().validated().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        infohub_core::chunking::ChunkingPolicy::new(
            self.max_sentences_per_chunk,
            self.overlap_sentences,
            self.max_chunk_chars,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.peers()?;
        if self.gossip_period_secs == 0 {
            return Err(ConfigError::Invalid("gossip_period_secs must be positive".into()));
        }
        Ok(())
    }
}
