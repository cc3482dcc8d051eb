//! Content-addressed knowledge store with exact top-k cosine retrieval and
//! a single-file checksummed snapshot.
//!
//! Chunks are keyed by the SHA-256 of their normalized text, so teaching
//! the same content twice is a no-op. Reads take a shared lock over the
//! whole chunk map and therefore always observe either all or none of a
//! concurrent ingest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binary::{ReadError, Reader, Writer};
use crate::chunking::{chunk_text, ChunkingPolicy, InvalidPolicy};
use crate::embedder::{cosine, normalize_text, EmbedError, Embedder, EmbedderConfig, Embedding};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SUZM";
pub const SNAPSHOT_FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("nothing ingestible after normalization")]
    EmptyText,
    #[error("store is closed")]
    StoreClosed,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("dimension mismatch: store uses {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unknown chunk {0}")]
    NotFound(ChunkId),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Policy(#[from] InvalidPolicy),
    #[error("snapshot I/O failed: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

/// Hex-encoded SHA-256 of a chunk's normalized text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(String);

impl ChunkId {
    pub fn for_normalized(normalized_text: &str) -> Self {
        Self(hex::encode(Sha256::digest(normalized_text.as_bytes())))
    }

    /// Parses a 64-character lowercase hex digest.
    pub fn parse(s: &str) -> Option<Self> {
        (s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))).then(|| Self(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Origin hub and that hub's monotonic counter at creation time.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Version {
    pub origin_hub: String,
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeChunk {
    pub id: ChunkId,
    pub text: String,
    pub normalized_text: String,
    pub embedding: Embedding,
    pub source_session: String,
    pub topic_tags: BTreeSet<String>,
    pub shareable: bool,
    pub origin_hub: String,
    pub version_counter: u64,
    pub created_at: DateTime<Utc>,
}

impl KnowledgeChunk {
    pub fn version(&self) -> Version {
        Version { origin_hub: self.origin_hub.clone(), counter: self.version_counter }
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.str(self.id.as_str()).str(&self.text).str(&self.normalized_text).str(&self.source_session);
        w.u32(crate::binary::len_u32(self.topic_tags.len()));
        for tag in &self.topic_tags {
            w.str(tag);
        }
        w.u8(u8::from(self.shareable))
            .str(&self.origin_hub)
            .u64(self.version_counter)
            .i64(self.created_at.timestamp_micros())
            .u32(crate::binary::len_u32(self.embedding.dimension()));
        for &v in self.embedding.values() {
            w.f32(v);
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, RecordError> {
        let id = r.string()?;
        let id = ChunkId::parse(&id).ok_or(RecordError::BadId)?;
        let text = r.string()?;
        let normalized_text = r.string()?;
        let source_session = r.string()?;
        let tag_count = r.count(4)?;
        let mut topic_tags = BTreeSet::new();
        for _ in 0..tag_count {
            topic_tags.insert(r.string()?);
        }
        let shareable = r.bool()?;
        let origin_hub = r.string()?;
        let version_counter = r.u64()?;
        let created_at = DateTime::from_timestamp_micros(r.i64()?).ok_or(RecordError::BadTimestamp)?;
        let dim = r.count(4)?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(r.f32()?);
        }
        let embedding = Embedding::from_normalized(values)?;
        Ok(Self {
            id,
            text,
            normalized_text,
            embedding,
            source_session,
            topic_tags,
            shareable,
            origin_hub,
            version_counter,
            created_at,
        })
    }

    /// Serialized record bytes (the snapshot and sync-delta record format).
    pub fn to_record_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.into_vec()
    }

    pub fn from_record_bytes(bytes: &[u8]) -> Result<Self, RecordError> {
        let mut r = Reader::new(bytes);
        let chunk = Self::decode(&mut r)?;
        r.finish()?;
        Ok(chunk)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error("chunk id is not a sha-256 hex digest")]
    BadId,
    #[error("timestamp out of range")]
    BadTimestamp,
    #[error("invalid embedding: {0}")]
    Embedding(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub chunk_id: ChunkId,
    pub score: f64,
    pub rank: usize,
}

/// Predicate over chunk metadata; unset fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkFilter {
    pub shareable: Option<bool>,
    /// Matches chunks carrying at least one of these tags (ignored if empty).
    pub any_tags: BTreeSet<String>,
    pub source_session: Option<String>,
}

impl ChunkFilter {
    pub fn shareable(value: bool) -> Self {
        Self { shareable: Some(value), ..Self::default() }
    }

    pub fn matches(&self, chunk: &KnowledgeChunk) -> bool {
        self.shareable.is_none_or(|s| chunk.shareable == s)
            && (self.any_tags.is_empty() || !self.any_tags.is_disjoint(&chunk.topic_tags))
            && self.source_session.as_ref().is_none_or(|s| &chunk.source_session == s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestOptions {
    pub source_session: String,
    pub tags: BTreeSet<String>,
    pub shareable: bool,
}

impl IngestOptions {
    pub fn session(id: impl Into<String>) -> Self {
        Self { source_session: id.into(), ..Self::default() }
    }

    pub fn shared(mut self, shareable: bool) -> Self {
        self.shareable = shareable;
        self
    }

    pub fn tagged<I: IntoIterator<Item = S>, S: Into<String>>(mut self, tags: I) -> Self {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    pub hub_id: String,
    pub embedder: EmbedderConfig,
    pub chunking: ChunkingPolicy,
}

impl StoreConfig {
    pub fn new(hub_id: impl Into<String>) -> Self {
        Self { hub_id: hub_id.into(), embedder: EmbedderConfig::default(), chunking: ChunkingPolicy::default() }
    }
}

#[derive(Debug)]
struct Inner {
    hub_id: String,
    chunks: BTreeMap<ChunkId, Arc<KnowledgeChunk>>,
    counter: u64,
    closed: bool,
}

pub struct KnowledgeStore {
    embedder: Arc<dyn Embedder>,
    policy: ChunkingPolicy,
    inner: RwLock<Inner>,
}

impl fmt::Debug for KnowledgeStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeStore")
            .field("dimension", &self.embedder.dimension())
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

pub(crate) fn now_micros() -> DateTime<Utc> {
    let now = Utc::now();
    DateTime::from_timestamp_micros(now.timestamp_micros()).unwrap_or(now)
}

impl KnowledgeStore {
    pub fn open(config: &StoreConfig) -> Result<Self, StoreError> {
        let embedder: Arc<dyn Embedder> = Arc::from(config.embedder.build()?);
        Self::with_embedder(&config.hub_id, embedder, config.chunking)
    }

    pub fn with_embedder(
        hub_id: &str,
        embedder: Arc<dyn Embedder>,
        policy: ChunkingPolicy,
    ) -> Result<Self, StoreError> {
        policy.validate()?;
        Ok(Self {
            embedder,
            policy,
            inner: RwLock::new(Inner {
                hub_id: hub_id.to_string(),
                chunks: BTreeMap::new(),
                counter: 0,
                closed: false,
            }),
        })
    }

    fn read(&self) -> Result<RwLockReadGuard<'_, Inner>, StoreError> {
        let guard = self.inner.read().unwrap_or_else(|e| e.into_inner());
        if guard.closed {
            return Err(StoreError::StoreClosed);
        }
        Ok(guard)
    }

    fn write(&self) -> Result<RwLockWriteGuard<'_, Inner>, StoreError> {
        let guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        if guard.closed {
            return Err(StoreError::StoreClosed);
        }
        Ok(guard)
    }

    pub fn hub_id(&self) -> String {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).hub_id.clone()
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn dimension(&self) -> usize {
        self.embedder.dimension()
    }

    pub fn policy(&self) -> &ChunkingPolicy {
        &self.policy
    }

    pub fn len(&self) -> usize {
        self.read().map(|g| g.chunks.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn version_counter(&self) -> u64 {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).counter
    }

    pub fn close(&self) {
        self.inner.write().unwrap_or_else(|e| e.into_inner()).closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).closed
    }

    pub fn get(&self, id: &ChunkId) -> Option<Arc<KnowledgeChunk>> {
        self.read().ok()?.chunks.get(id).cloned()
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.read().map(|g| g.chunks.contains_key(id)).unwrap_or(false)
    }

    /// All chunks passing `filter`, in id order.
    pub fn chunks(&self, filter: Option<&ChunkFilter>) -> Result<Vec<Arc<KnowledgeChunk>>, StoreError> {
        let guard = self.read()?;
        Ok(guard.chunks.values().filter(|c| filter.is_none_or(|f| f.matches(c))).cloned().collect())
    }

    /// Chunks `text`, embeds every chunk not already present and stores it
    /// under a fresh version counter. Returns one id per chunk, in chunk
    /// order, including chunks that were already stored.
    pub fn ingest(&self, text: &str, opts: &IngestOptions) -> Result<Vec<ChunkId>, StoreError> {
        drop(self.read()?);
        let mut prepared: Vec<(ChunkId, String, String)> = Vec::new();
        for piece in chunk_text(text, &self.policy) {
            let normalized = normalize_text(&piece);
            if normalized.is_empty() {
                continue;
            }
            prepared.push((ChunkId::for_normalized(&normalized), piece, normalized));
        }

        let mut ids = Vec::with_capacity(prepared.len());
        let mut fresh: Vec<(ChunkId, String, String, Embedding)> = Vec::new();
        {
            let guard = self.read()?;
            for (id, piece, normalized) in prepared {
                if guard.chunks.contains_key(&id) || fresh.iter().any(|f| f.0 == id) {
                    ids.push(id);
                    continue;
                }
                match self.embedder.embed(&normalized) {
                    Ok(embedding) => {
                        ids.push(id.clone());
                        fresh.push((id, piece, normalized, embedding));
                    }
                    // Too short to embed on its own; skip the chunk.
                    Err(EmbedError::EmptyText | EmbedError::DegenerateVector) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        if ids.is_empty() {
            return Err(StoreError::EmptyText);
        }

        let mut guard = self.write()?;
        let created_at = now_micros();
        for (id, text, normalized_text, embedding) in fresh {
            if guard.chunks.contains_key(&id) {
                continue;
            }
            guard.counter += 1;
            let chunk = KnowledgeChunk {
                id: id.clone(),
                text,
                normalized_text,
                embedding,
                source_session: opts.source_session.clone(),
                topic_tags: opts.tags.clone(),
                shareable: opts.shareable,
                origin_hub: guard.hub_id.clone(),
                version_counter: guard.counter,
                created_at,
            };
            guard.chunks.insert(id, Arc::new(chunk));
        }
        Ok(ids)
    }

    /// Inserts fully formed chunks (e.g. received from a peer) in one atomic
    /// step, skipping ids already present. Returns how many were new.
    pub fn insert_chunks(&self, chunks: Vec<KnowledgeChunk>) -> Result<usize, StoreError> {
        let dim = self.dimension();
        if let Some(bad) = chunks.iter().find(|c| c.embedding.dimension() != dim) {
            return Err(StoreError::DimensionMismatch { expected: dim, found: bad.embedding.dimension() });
        }
        let mut guard = self.write()?;
        let mut added = 0;
        for chunk in chunks {
            if !guard.chunks.contains_key(&chunk.id) {
                guard.chunks.insert(chunk.id.clone(), Arc::new(chunk));
                added += 1;
            }
        }
        Ok(added)
    }

    /// Exact top-`k` cosine search over chunks passing `filter`. Ties on
    /// score are broken by ascending chunk id.
    pub fn search(
        &self,
        query: &Embedding,
        k: usize,
        filter: Option<&ChunkFilter>,
    ) -> Result<Vec<RetrievalResult>, StoreError> {
        Ok(self.search_chunks(query, k, filter)?.into_iter().map(|(r, _)| r).collect())
    }

    /// Like [`search`](Self::search) but also returns the matched chunks,
    /// read under the same lock.
    pub fn search_chunks(
        &self,
        query: &Embedding,
        k: usize,
        filter: Option<&ChunkFilter>,
    ) -> Result<Vec<(RetrievalResult, Arc<KnowledgeChunk>)>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        if query.dimension() != self.dimension() {
            return Err(StoreError::DimensionMismatch { expected: self.dimension(), found: query.dimension() });
        }
        let guard = self.read()?;
        let mut scored: Vec<(f64, &Arc<KnowledgeChunk>)> = Vec::with_capacity(guard.chunks.len());
        for chunk in guard.chunks.values() {
            if filter.is_none_or(|f| f.matches(chunk)) {
                scored.push((cosine(query, &chunk.embedding)?, chunk));
            }
        }
        let order = |a: &(f64, &Arc<KnowledgeChunk>), b: &(f64, &Arc<KnowledgeChunk>)| {
            b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (score, chunk))| {
                (RetrievalResult { chunk_id: chunk.id.clone(), score, rank: i + 1 }, Arc::clone(chunk))
            })
            .collect())
    }

    /// Removes every chunk taught in `source_session`.
    pub fn forget(&self, source_session: &str) -> Result<usize, StoreError> {
        let mut guard = self.write()?;
        let before = guard.chunks.len();
        guard.chunks.retain(|_, c| c.source_session != source_session);
        Ok(before - guard.chunks.len())
    }

    pub fn set_shareable(&self, id: &ChunkId, shareable: bool) -> Result<(), StoreError> {
        let mut guard = self.write()?;
        let chunk = guard.chunks.get_mut(id).ok_or_else(|| StoreError::NotFound(id.clone()))?;
        Arc::make_mut(chunk).shareable = shareable;
        Ok(())
    }

    /// Serializes the whole store. Layout (little-endian):
    ///
    /// ```text
    /// "SUZM" | u16 format | u16 dimension | str hub_id | u64 counter
    /// | u32 n | n × (u32 len, record) | u32 crc32(all preceding bytes)
    /// ```
    pub fn snapshot_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let guard = self.read()?;
        let mut w = Writer::new();
        w.raw(SNAPSHOT_MAGIC)
            .u16(SNAPSHOT_FORMAT_VERSION)
            .u16(u16::try_from(self.dimension()).expect("dimension validated to fit u16"))
            .str(&guard.hub_id)
            .u64(guard.counter)
            .u32(crate::binary::len_u32(guard.chunks.len()));
        for chunk in guard.chunks.values() {
            w.bytes(&chunk.to_record_bytes());
        }
        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        Ok(w.into_vec())
    }

    pub fn snapshot(&self, path: &Path) -> Result<(), StoreError> {
        let bytes = self.snapshot_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Replaces the store's contents with a snapshot. On any error the
    /// store is left unchanged.
    pub fn load_bytes(&self, bytes: &[u8]) -> Result<(), StoreError> {
        let corrupt = |why: &str| StoreError::CorruptSnapshot(why.to_string());
        if bytes.len() < SNAPSHOT_MAGIC.len() + 8 {
            return Err(corrupt("file too short"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored_crc {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader::new(body);
        let bad = |e: ReadError| StoreError::CorruptSnapshot(e.to_string());
        if r.take(4).map_err(bad)? != SNAPSHOT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let format = r.u16().map_err(bad)?;
        if format != SNAPSHOT_FORMAT_VERSION {
            return Err(StoreError::CorruptSnapshot(format!("unsupported format version {format}")));
        }
        let dim = usize::from(r.u16().map_err(bad)?);
        if dim != self.dimension() {
            return Err(StoreError::DimensionMismatch { expected: self.dimension(), found: dim });
        }
        let hub_id = r.string().map_err(bad)?;
        let counter = r.u64().map_err(bad)?;
        let n = r.count(4).map_err(bad)?;
        let mut chunks = BTreeMap::new();
        for _ in 0..n {
            let record = r.bytes().map_err(bad)?;
            let chunk =
                KnowledgeChunk::from_record_bytes(record).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
            if chunk.embedding.dimension() != dim {
                return Err(corrupt("record dimension differs from header"));
            }
            chunks.insert(chunk.id.clone(), Arc::new(chunk));
        }
        r.finish().map_err(bad)?;

        let mut guard = self.write()?;
        guard.hub_id = hub_id;
        guard.counter = counter;
        guard.chunks = chunks;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<(), StoreError> {
        let bytes = fs::read(path)?;
        self.load_bytes(&bytes)
    }
}
