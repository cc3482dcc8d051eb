use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{sync_round, HubIdentity, PeerLink, SyncError, SyncOutcome, TcpLink};
use crate::store::KnowledgeStore;

/// Opens links to peers. Lets the scheduler run over TCP or anything else.
pub trait PeerConnector: Send + Sync {
    fn connect(&self, peer: &HubIdentity) -> Result<Box<dyn PeerLink>, SyncError>;
}

pub struct TcpConnector {
    pub timeout: Duration,
}

impl PeerConnector for TcpConnector {
    fn connect(&self, peer: &HubIdentity) -> Result<Box<dyn PeerLink>, SyncError> {
        Ok(Box::new(TcpLink::connect(&peer.address, self.timeout)?))
    }
}

/// Shared, editable peer list.
#[derive(Clone, Default)]
pub struct PeerList(Arc<RwLock<Vec<HubIdentity>>>);

impl PeerList {
    pub fn new(peers: Vec<HubIdentity>) -> Self {
        Self(Arc::new(RwLock::new(peers)))
    }

    pub fn snapshot(&self) -> Vec<HubIdentity> {
        self.0.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Adds or replaces the entry with the same hub id.
    pub fn upsert(&self, peer: HubIdentity) {
        let mut peers = self.0.write().unwrap_or_else(|e| e.into_inner());
        match peers.iter_mut().find(|p| p.hub_id == peer.hub_id) {
            Some(slot) => *slot = peer,
            None => peers.push(peer),
        }
    }

    pub fn len(&self) -> usize {
        self.0.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Called after every attempted round.
pub type SyncObserver = Box<dyn Fn(&HubIdentity, &Result<SyncOutcome, SyncError>) + Send>;

/// Background gossip: each period, sync with the next peer in round-robin
/// order. Failures are logged and skipped.
pub struct GossipHandle {
    stop: Option<mpsc::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl GossipHandle {
    pub fn spawn(
        store: Arc<KnowledgeStore>,
        peers: PeerList,
        period: Duration,
        connector: Arc<dyn PeerConnector>,
        observer: Option<SyncObserver>,
    ) -> Self {
        let (tx, rx) = mpsc::channel::<()>();
        let thread = std::thread::spawn(move || {
            let mut next = 0usize;
            // A stop message or a dropped sender ends the loop.
            while let Err(RecvTimeoutError::Timeout) = rx.recv_timeout(period) {
                let list = peers.snapshot();
                if list.is_empty() {
                    continue;
                }
                let peer = &list[next % list.len()];
                next = next.wrapping_add(1);
                let result = connector.connect(peer).and_then(|mut link| sync_round(&store, &mut link));
                match &result {
                    Ok(o) => log::info!("sync with {}: received {}, pushed {}", peer.hub_id, o.received, o.pushed),
                    Err(e) => log::warn!("sync with {} failed: {e}", peer.hub_id),
                }
                if let Some(observe) = &observer {
                    observe(peer, &result);
                }
            }
        });
        Self { stop: Some(tx), thread: Some(thread) }
    }

    /// Stops the loop and waits for an in-flight round to finish. No round
    /// starts after this returns.
    pub fn stop(&mut self) {
        self.stop.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for GossipHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
