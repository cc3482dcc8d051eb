//! Speech-to-text, text generation and text-to-speech contracts.
//!
//! Each contract has a deterministic stub so the full pipeline runs with
//! no models, and an HTTP client for a local inference server.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::split_sentences;
use crate::remote::HttpEndpoint;
use crate::store::ChunkId;

pub const FALLBACK_REPLY: &str = "I have not been taught about that yet.";
pub const TEXT_PLAIN: &str = "text/plain";
pub const DEFAULT_MAX_REPLY_CHARS: usize = 800;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("unsupported audio format {0:?}")]
    UnsupportedFormat(String),
    #[error("backend unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("empty audio payload")]
    EmptyAudio,
    #[error("empty text")]
    EmptyText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    Presenter,
    Visitor,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub chunk_id: ChunkId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub system_instructions: String,
    /// Ordered by descending retrieval score, ties by chunk id.
    pub context_blocks: Vec<ContextBlock>,
    /// Chronological.
    pub history: Vec<(SpeakerRole, String)>,
    pub question: String,
    pub max_reply_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationReply {
    pub text: String,
    pub cited_chunk_ids: Vec<ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesizedAudio {
    pub bytes: Vec<u8>,
    pub format_tag: String,
}

pub trait SpeechToText: Send + Sync {
    fn transcribe(&self, audio: &[u8], format_tag: &str) -> Result<String, BackendError>;
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationReply, BackendError>;
}

pub trait TextToSpeech: Send + Sync {
    fn synthesize(&self, text: &str) -> Result<SynthesizedAudio, BackendError>;
}

/// Treats `text/plain` payloads as already-transcribed UTF-8.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubSpeechToText;

impl SpeechToText for StubSpeechToText {
    fn transcribe(&self, audio: &[u8], format_tag: &str) -> Result<String, BackendError> {
        if audio.is_empty() {
            return Err(BackendError::EmptyAudio);
        }
        if format_tag != TEXT_PLAIN {
            return Err(BackendError::UnsupportedFormat(format_tag.to_string()));
        }
        String::from_utf8(audio.to_vec())
            .map_err(|_| BackendError::UnsupportedFormat("text/plain (invalid utf-8)".into()))
    }
}

/// Extractive generator: replies with whole sentences copied from the
/// context blocks, in order, until the reply budget would be exceeded.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubGenerator;

impl TextGenerator for StubGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationReply, BackendError> {
        if request.question.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        if request.context_blocks.is_empty() {
            return Ok(GenerationReply { text: FALLBACK_REPLY.to_string(), cited_chunk_ids: Vec::new() });
        }
        let mut picked: Vec<&str> = Vec::new();
        let mut seen: HashSet<&str> = HashSet::new();
        let mut cited: Vec<ChunkId> = Vec::new();
        let mut used = 0usize;
        'blocks: for block in &request.context_blocks {
            for sentence in split_sentences(&block.text) {
                if seen.contains(sentence) {
                    continue;
                }
                let len = sentence.chars().count();
                let needed = if picked.is_empty() { len } else { used + 1 + len };
                // The first sentence is always taken so a grounded reply is
                // never empty, even when it alone exceeds the budget.
                if needed > request.max_reply_chars && !picked.is_empty() {
                    break 'blocks;
                }
                picked.push(sentence);
                seen.insert(sentence);
                used = needed;
                if cited.last() != Some(&block.chunk_id) {
                    cited.push(block.chunk_id.clone());
                }
            }
        }
        Ok(GenerationReply { text: picked.join(" "), cited_chunk_ids: cited })
    }
}

/// Emits the text itself as `text/plain` "audio".
#[derive(Debug, Clone, Copy, Default)]
pub struct StubSpeechSynth;

impl TextToSpeech for StubSpeechSynth {
    fn synthesize(&self, text: &str) -> Result<SynthesizedAudio, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyText);
        }
        Ok(SynthesizedAudio { bytes: text.as_bytes().to_vec(), format_tag: TEXT_PLAIN.to_string() })
    }
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

/// `POST` raw audio with `Content-Type: <format_tag>` → `{"text": ...}`.
pub struct RemoteSpeechToText {
    endpoint: HttpEndpoint,
}

impl RemoteSpeechToText {
    pub fn new(url: &str, timeout: Duration) -> Self {
        Self { endpoint: HttpEndpoint::new(url, timeout) }
    }
}

impl SpeechToText for RemoteSpeechToText {
    fn transcribe(&self, audio: &[u8], format_tag: &str) -> Result<String, BackendError> {
        if audio.is_empty() {
            return Err(BackendError::EmptyAudio);
        }
        let reply: TextResponse =
            self.endpoint.post_bytes_for_json(audio, format_tag).map_err(BackendError::RemoteUnavailable)?;
        Ok(reply.text)
    }
}

#[derive(Debug, Serialize)]
struct WireMessage<'a> {
    role: SpeakerRole,
    text: &'a str,
}

#[derive(Debug, Serialize)]
struct WireContext<'a> {
    id: &'a str,
    text: &'a str,
}

#[derive(Debug, Serialize)]
struct WireGeneration<'a> {
    system: &'a str,
    messages: Vec<WireMessage<'a>>,
    context: Vec<WireContext<'a>>,
    max_chars: usize,
}

/// Chat-completion style generation endpoint.
pub struct RemoteGenerator {
    endpoint: HttpEndpoint,
}

impl RemoteGenerator {
    pub fn new(url: &str, timeout: Duration) -> Self {
        Self { endpoint: HttpEndpoint::new(url, timeout) }
    }
}

/// Renders a request into the generation endpoint's JSON body. The
/// question is the final visitor message.
pub fn render_generation_body(request: &GenerationRequest) -> serde_json::Value {
    let mut messages: Vec<WireMessage<'_>> =
        request.history.iter().map(|(role, text)| WireMessage { role: *role, text }).collect();
    messages.push(WireMessage { role: SpeakerRole::Visitor, text: &request.question });
    let body = WireGeneration {
        system: &request.system_instructions,
        messages,
        context: request
            .context_blocks
            .iter()
            .map(|b| WireContext { id: b.chunk_id.as_str(), text: &b.text })
            .collect(),
        max_chars: request.max_reply_chars,
    };
    serde_json::to_value(body).expect("generation body serializes")
}

impl TextGenerator for RemoteGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationReply, BackendError> {
        if request.question.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        let reply: TextResponse =
            self.endpoint.post_json(&render_generation_body(request)).map_err(BackendError::RemoteUnavailable)?;
        Ok(GenerationReply {
            text: reply.text,
            cited_chunk_ids: request.context_blocks.iter().map(|b| b.chunk_id.clone()).collect(),
        })
    }
}

#[derive(Serialize)]
struct SynthRequest<'a> {
    text: &'a str,
}

/// `POST {"text": ...}` → raw audio bytes with their `Content-Type`.
pub struct RemoteSpeechSynth {
    endpoint: HttpEndpoint,
}

impl RemoteSpeechSynth {
    pub fn new(url: &str, timeout: Duration) -> Self {
        Self { endpoint: HttpEndpoint::new(url, timeout) }
    }
}

impl TextToSpeech for RemoteSpeechSynth {
    fn synthesize(&self, text: &str) -> Result<SynthesizedAudio, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyText);
        }
        let (bytes, format_tag) =
            self.endpoint.post_json_for_bytes(&SynthRequest { text }).map_err(BackendError::RemoteUnavailable)?;
        Ok(SynthesizedAudio { bytes, format_tag })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendsConfig {
    pub stt_endpoint: Option<String>,
    pub llm_endpoint: Option<String>,
    pub tts_endpoint: Option<String>,
    pub timeout_ms: u64,
    /// Answer with the stub when a remote backend is unreachable.
    pub fallback_to_stub: bool,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self { stt_endpoint: None, llm_endpoint: None, tts_endpoint: None, timeout_ms: 30_000, fallback_to_stub: true }
    }
}

/// The three backends plus the fallback policy.
#[derive(Clone)]
pub struct Backends {
    pub stt: Arc<dyn SpeechToText>,
    pub generator: Arc<dyn TextGenerator>,
    pub tts: Arc<dyn TextToSpeech>,
    pub fallback_to_stub: bool,
}

impl Default for Backends {
    fn default() -> Self {
        Self::stub()
    }
}

impl Backends {
    pub fn stub() -> Self {
        Self {
            stt: Arc::new(StubSpeechToText),
            generator: Arc::new(StubGenerator),
            tts: Arc::new(StubSpeechSynth),
            fallback_to_stub: true,
        }
    }

    pub fn from_config(config: &BackendsConfig) -> Self {
        let timeout = Duration::from_millis(config.timeout_ms);
        let stt: Arc<dyn SpeechToText> = match &config.stt_endpoint {
            Some(url) => Arc::new(RemoteSpeechToText::new(url, timeout)),
            None => Arc::new(StubSpeechToText),
        };
        let generator: Arc<dyn TextGenerator> = match &config.llm_endpoint {
            Some(url) => Arc::new(RemoteGenerator::new(url, timeout)),
            None => Arc::new(StubGenerator),
        };
        let tts: Arc<dyn TextToSpeech> = match &config.tts_endpoint {
            Some(url) => Arc::new(RemoteSpeechSynth::new(url, timeout)),
            None => Arc::new(StubSpeechSynth),
        };
        Self { stt, generator, tts, fallback_to_stub: config.fallback_to_stub }
    }

    pub fn transcribe(&self, audio: &[u8], format_tag: &str) -> Result<String, BackendError> {
        match self.stt.transcribe(audio, format_tag) {
            Err(BackendError::RemoteUnavailable(why)) if self.fallback_to_stub => {
                log::warn!("speech-to-text unavailable ({why}); using stub");
                StubSpeechToText.transcribe(audio, format_tag)
            }
            other => other,
        }
    }

    /// Generates a reply; citations are restricted to the request's
    /// context ids whatever the backend returns.
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationReply, BackendError> {
        let mut reply = match self.generator.generate(request) {
            Err(BackendError::RemoteUnavailable(why)) if self.fallback_to_stub => {
                log::warn!("generator unavailable ({why}); using stub");
                StubGenerator.generate(request)
            }
            other => other,
        }?;
        reply.cited_chunk_ids.retain(|id| request.context_blocks.iter().any(|b| &b.chunk_id == id));
        Ok(reply)
    }

    pub fn synthesize(&self, text: &str) -> Result<SynthesizedAudio, BackendError> {
        match self.tts.synthesize(text) {
            Err(BackendError::RemoteUnavailable(why)) if self.fallback_to_stub => {
                log::warn!("speech synthesis unavailable ({why}); using stub");
                StubSpeechSynth.synthesize(text)
            }
            other => other,
        }
    }
}
