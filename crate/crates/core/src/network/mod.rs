//! Consent-filtered anti-entropy between peer hubs.
//!
//! A round is pull then push: exchange digests, request what we lack and
//! receive it as a delta, then push what the peer lacks and wait for its
//! acknowledgement. The pulled delta is applied only after that
//! acknowledgement, so a broken link leaves the local store untouched.
//!
//! Only chunks with `shareable = true` are ever enumerated, serialized or
//! accepted.

mod gossip;
mod sim;
mod tcp;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binary::{ReadError, Reader, Writer};
use crate::embedder::normalize_text;
use crate::store::{ChunkFilter, ChunkId, KnowledgeChunk, KnowledgeStore, StoreError, Version};
use crate::wire::{self, FrameError};

pub use gossip::{GossipHandle, PeerConnector, PeerList, SyncObserver, TcpConnector};
pub use sim::{simulate, simulate_observed, RoundStats, SimConfig, SimReport, Topology, WireDirection, WireEvent};
pub use tcp::{serve_connection, SyncServer, TcpLink};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HubIdentity {
    pub hub_id: String,
    /// Transport locator, e.g. `host:port`.
    pub address: String,
}

impl HubIdentity {
    pub fn new(hub_id: impl Into<String>, address: impl Into<String>) -> Self {
        Self { hub_id: hub_id.into(), address: address.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SyncDigest {
    pub hub_id: String,
    pub entries: BTreeMap<ChunkId, Version>,
}

impl SyncDigest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("peer reported error: {0}")]
    Remote(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

/// Why a received chunk was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// The chunk claims `shareable = false`.
    ConsentViolation,
    /// The id is not the hash of the normalized text, or the normalized
    /// text does not match the text.
    IdMismatch,
    /// Not among the ids we asked for.
    Unrequested,
    /// The receiver's embedder could not embed the text.
    Unembeddable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub chunk_id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SyncOutcome {
    /// Chunks newly stored locally.
    pub received: usize,
    /// Chunks the peer newly stored from our push.
    pub pushed: usize,
    pub rejected: Vec<Rejection>,
}

pub mod sync_type {
    pub const DIGEST: u8 = 1;
    pub const DIFF_REQUEST: u8 = 2;
    pub const DELTA: u8 = 3;
    pub const ACK: u8 = 4;
    pub const ERROR: u8 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyncMessage {
    Digest(SyncDigest),
    /// Sorted ids the sender lacks.
    DiffRequest(Vec<ChunkId>),
    Delta(Vec<KnowledgeChunk>),
    Ack {
        accepted: u32,
    },
    Error(String),
}

impl SyncMessage {
    pub fn kind(&self) -> u8 {
        use sync_type::*;
        match self {
            SyncMessage::Digest(_) => DIGEST,
            SyncMessage::DiffRequest(_) => DIFF_REQUEST,
            SyncMessage::Delta(_) => DELTA,
            SyncMessage::Ack { .. } => ACK,
            SyncMessage::Error(_) => ERROR,
        }
    }

    /// Full frame bytes, header included.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            SyncMessage::Digest(d) => {
                w.str(&d.hub_id).u32(crate::binary::len_u32(d.entries.len()));
                for (id, v) in &d.entries {
                    w.str(id.as_str()).str(&v.origin_hub).u64(v.counter);
                }
            }
            SyncMessage::DiffRequest(ids) => {
                w.u32(crate::binary::len_u32(ids.len()));
                for id in ids {
                    w.str(id.as_str());
                }
            }
            SyncMessage::Delta(chunks) => {
                w.u32(crate::binary::len_u32(chunks.len()));
                for c in chunks {
                    w.bytes(&c.to_record_bytes());
                }
            }
            SyncMessage::Ack { accepted } => {
                w.u32(*accepted);
            }
            SyncMessage::Error(msg) => {
                w.str(msg);
            }
        }
        wire::encode_raw(self.kind(), w.as_slice())
    }

    pub fn decode(frame: &[u8]) -> Result<Self, SyncError> {
        let (kind, payload, used) = wire::split_frame(frame).map_err(|e| SyncError::Protocol(e.to_string()))?;
        if used != frame.len() {
            return Err(SyncError::Protocol("trailing bytes after frame".into()));
        }
        Self::decode_payload(kind, payload)
    }

    pub fn decode_payload(kind: u8, payload: &[u8]) -> Result<Self, SyncError> {
        let protocol = |e: ReadError| SyncError::Protocol(format!("frame type {kind}: {e}"));
        let bad_id = || SyncError::Protocol(format!("frame type {kind}: malformed chunk id"));
        let mut r = Reader::new(payload);
        let msg = match kind {
            sync_type::DIGEST => {
                let hub_id = r.string().map_err(protocol)?;
                let n = r.count(4 + 4 + 8).map_err(protocol)?;
                let mut entries = BTreeMap::new();
                for _ in 0..n {
                    let id = ChunkId::parse(&r.string().map_err(protocol)?).ok_or_else(bad_id)?;
                    let origin_hub = r.string().map_err(protocol)?;
                    let counter = r.u64().map_err(protocol)?;
                    entries.insert(id, Version { origin_hub, counter });
                }
                SyncMessage::Digest(SyncDigest { hub_id, entries })
            }
            sync_type::DIFF_REQUEST => {
                let n = r.count(4).map_err(protocol)?;
                let mut ids = Vec::with_capacity(n);
                for _ in 0..n {
                    ids.push(ChunkId::parse(&r.string().map_err(protocol)?).ok_or_else(bad_id)?);
                }
                SyncMessage::DiffRequest(ids)
            }
            sync_type::DELTA => {
                let n = r.count(4).map_err(protocol)?;
                let mut chunks = Vec::with_capacity(n);
                for _ in 0..n {
                    let record = r.bytes().map_err(protocol)?;
                    let chunk = KnowledgeChunk::from_record_bytes(record)
                        .map_err(|e| SyncError::Protocol(format!("delta record: {e}")))?;
                    chunks.push(chunk);
                }
                SyncMessage::Delta(chunks)
            }
            sync_type::ACK => SyncMessage::Ack { accepted: r.u32().map_err(protocol)? },
            sync_type::ERROR => SyncMessage::Error(r.string().map_err(protocol)?),
            other => {
                return Err(SyncError::Protocol(
                    FrameError::UnknownType { kind: other, frame_len: wire::HEADER_LEN + payload.len() }.to_string(),
                ))
            }
        };
        r.finish().map_err(protocol)?;
        Ok(msg)
    }
}

/// Digest of every shareable chunk. Non-shareable chunks are never read
/// into the result.
pub fn make_digest(store: &KnowledgeStore) -> Result<SyncDigest, StoreError> {
    let entries =
        store.chunks(Some(&ChunkFilter::shareable(true)))?.into_iter().map(|c| (c.id.clone(), c.version())).collect();
    Ok(SyncDigest { hub_id: store.hub_id(), entries })
}

/// Ids present in `theirs` and absent from `mine`, ascending.
///
/// Ids are content hashes, so presence decides everything; versions ride
/// along for auditing only.
pub fn diff(mine: &SyncDigest, theirs: &SyncDigest) -> BTreeSet<ChunkId> {
    theirs.entries.keys().filter(|id| !mine.entries.contains_key(*id)).cloned().collect()
}

/// Shareable chunks for the requested ids. Unknown or non-shareable ids are
/// silently omitted.
pub fn make_delta(store: &KnowledgeStore, ids: &[ChunkId]) -> Vec<KnowledgeChunk> {
    ids.iter().filter_map(|id| store.get(id)).filter(|c| c.shareable).map(|c| (*c).clone()).collect()
}

/// Checks received chunks and re-embeds them under the local embedder when
/// their vectors differ. Returns accepted chunks and the rejections.
pub fn verify_delta(
    store: &KnowledgeStore,
    chunks: Vec<KnowledgeChunk>,
    requested: Option<&BTreeSet<ChunkId>>,
) -> (Vec<KnowledgeChunk>, Vec<Rejection>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let embedder = store.embedder();
    for mut chunk in chunks {
        let reject = |reason| Rejection { chunk_id: chunk.id.to_string(), reason };
        let verdict = if !chunk.shareable {
            Some(RejectReason::ConsentViolation)
        } else if requested.is_some_and(|r| !r.contains(&chunk.id)) {
            Some(RejectReason::Unrequested)
        } else if ChunkId::for_normalized(&chunk.normalized_text) != chunk.id
            || normalize_text(&chunk.text) != chunk.normalized_text
        {
            Some(RejectReason::IdMismatch)
        } else {
            None
        };
        if let Some(reason) = verdict {
            log::warn!("rejecting chunk {} from peer: {:?}", chunk.id, reason);
            rejected.push(reject(reason));
            continue;
        }
        match embedder.embed(&chunk.normalized_text) {
            Ok(local) => {
                if !local.bitwise_eq(&chunk.embedding) {
                    chunk.embedding = local;
                }
                accepted.push(chunk);
            }
            Err(e) => {
                log::warn!("rejecting chunk {}: cannot embed locally: {e}", chunk.id);
                rejected.push(reject(RejectReason::Unembeddable));
            }
        }
    }
    (accepted, rejected)
}

/// A request/response channel to one peer, carrying whole encoded frames.
pub trait PeerLink {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, SyncError>;
}

impl<L: PeerLink + ?Sized> PeerLink for Box<L> {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, SyncError> {
        (**self).exchange(request)
    }
}

/// Answers sync requests against a store. Holds no per-connection state.
#[derive(Clone)]
pub struct SyncResponder {
    store: Arc<KnowledgeStore>,
}

impl SyncResponder {
    pub fn new(store: Arc<KnowledgeStore>) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &Arc<KnowledgeStore> {
        &self.store
    }

    pub fn respond(&self, request: SyncMessage) -> SyncMessage {
        let result = match request {
            SyncMessage::Digest(_) => make_digest(&self.store).map(SyncMessage::Digest),
            SyncMessage::DiffRequest(ids) => Ok(SyncMessage::Delta(make_delta(&self.store, &ids))),
            SyncMessage::Delta(chunks) => {
                let (accepted, _) = verify_delta(&self.store, chunks, None);
                self.store
                    .insert_chunks(accepted)
                    .map(|n| SyncMessage::Ack { accepted: u32::try_from(n).unwrap_or(u32::MAX) })
            }
            SyncMessage::Ack { .. } | SyncMessage::Error(_) => {
                return SyncMessage::Error("unexpected message".into());
            }
        };
        result.unwrap_or_else(|e| SyncMessage::Error(e.to_string()))
    }

    /// Frame-level entry point used by transports.
    pub fn respond_bytes(&self, kind: u8, payload: &[u8]) -> Vec<u8> {
        match SyncMessage::decode_payload(kind, payload) {
            Ok(msg) => self.respond(msg).encode(),
            Err(e) => SyncMessage::Error(e.to_string()).encode(),
        }
    }
}

fn call(link: &mut dyn PeerLink, msg: &SyncMessage) -> Result<SyncMessage, SyncError> {
    let reply = SyncMessage::decode(&link.exchange(&msg.encode())?)?;
    match reply {
        SyncMessage::Error(e) => Err(SyncError::Remote(e)),
        other => Ok(other),
    }
}

fn unexpected(expected: &str, got: &SyncMessage) -> SyncError {
    SyncError::Protocol(format!("expected {expected}, got frame type {}", got.kind()))
}

/// One pull-push round with a peer.
pub fn sync_round(store: &KnowledgeStore, link: &mut dyn PeerLink) -> Result<SyncOutcome, SyncError> {
    let mine = make_digest(store)?;
    let theirs = match call(link, &SyncMessage::Digest(mine.clone()))? {
        SyncMessage::Digest(d) => d,
        other => return Err(unexpected("DIGEST", &other)),
    };

    let wanted = diff(&mine, &theirs);
    let mut staged = Vec::new();
    let mut rejected = Vec::new();
    if !wanted.is_empty() {
        let request = SyncMessage::DiffRequest(wanted.iter().cloned().collect());
        match call(link, &request)? {
            SyncMessage::Delta(chunks) => {
                let (ok, bad) = verify_delta(store, chunks, Some(&wanted));
                staged = ok;
                rejected = bad;
            }
            other => return Err(unexpected("DELTA", &other)),
        }
    }

    let lacking: Vec<ChunkId> = diff(&theirs, &mine).into_iter().collect();
    let push = make_delta(store, &lacking);
    let mut pushed = 0;
    if !push.is_empty() {
        match call(link, &SyncMessage::Delta(push))? {
            SyncMessage::Ack { accepted } => pushed = accepted as usize,
            other => return Err(unexpected("ACK", &other)),
        }
    }

    let received = store.insert_chunks(staged)?;
    Ok(SyncOutcome { received, pushed, rejected })
}

#[cfg(test)]
mod tests;
