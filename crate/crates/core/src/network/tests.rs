use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use proptest::prelude::*;

use super::*;
use crate::chunking::ChunkingPolicy;
use crate::embedder::{Embedding, ReferenceEmbedder};
use crate::store::IngestOptions;

fn store(hub: &str) -> Arc<KnowledgeStore> {
    let embedder = Arc::new(ReferenceEmbedder::new(64).unwrap());
    Arc::new(KnowledgeStore::with_embedder(hub, embedder, ChunkingPolicy::default()).unwrap())
}

fn teach(store: &KnowledgeStore, text: &str, shareable: bool) -> ChunkId {
    let ids = store.ingest(text, &IngestOptions::session("s").shared(shareable)).unwrap();
    assert_eq!(ids.len(), 1);
    ids[0].clone()
}

/// In-memory link that records every frame and can fail at a given message.
struct LocalLink {
    peer: SyncResponder,
    log: Vec<Vec<u8>>,
    fail_at: Option<usize>,
}

impl LocalLink {
    fn new(peer: &Arc<KnowledgeStore>) -> Self {
        Self { peer: SyncResponder::new(Arc::clone(peer)), log: Vec::new(), fail_at: None }
    }
}

impl PeerLink for LocalLink {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, SyncError> {
        if self.fail_at == Some(self.log.len()) {
            return Err(SyncError::PeerUnreachable("cut".into()));
        }
        self.log.push(request.to_vec());
        let (kind, payload, _) = wire::split_frame(request).unwrap();
        let reply = self.peer.respond_bytes(kind, payload);
        if self.fail_at == Some(self.log.len()) {
            return Err(SyncError::PeerUnreachable("cut".into()));
        }
        self.log.push(reply.clone());
        Ok(reply)
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn digest_skips_private_chunks() {
    let s = store("a");
    for i in 0..5 {
        teach(&s, &format!("private fact number {i}."), false);
    }
    assert!(make_digest(&s).unwrap().is_empty());

    let shared: Vec<ChunkId> = (0..3).map(|i| teach(&s, &format!("public fact number {i}."), true)).collect();
    let digest = make_digest(&s).unwrap();
    assert_eq!(digest.len(), 3);
    for id in &shared {
        assert_eq!(digest.entries[id], s.get(id).unwrap().version());
    }
    assert_eq!(digest, make_digest(&s).unwrap());
}

#[test]
fn digest_of_closed_store_fails() {
    let s = store("a");
    s.close();
    assert!(matches!(make_digest(&s), Err(StoreError::StoreClosed)));
}

fn digest_of(ids: &BTreeSet<u8>) -> SyncDigest {
    let entries = ids
        .iter()
        .map(|b| {
            let id = ChunkId::parse(&format!("{b:02x}").repeat(32)).unwrap();
            (id, Version { origin_hub: "h".into(), counter: u64::from(*b) })
        })
        .collect();
    SyncDigest { hub_id: "h".into(), entries }
}

#[test]
fn diff_basics() {
    let x = digest_of(&[1, 2, 3].into());
    assert!(diff(&x, &x).is_empty());
    let theirs = digest_of(&[7, 9].into());
    assert_eq!(diff(&SyncDigest::default(), &theirs), theirs.entries.keys().cloned().collect());
}

proptest! {
    #[test]
    fn diff_matches_set_subtraction(a in proptest::collection::btree_set(any::<u8>(), 0..40),
                                    b in proptest::collection::btree_set(any::<u8>(), 0..40)) {
        // Oracle: B \ A on plain integers, mapped through the same id scheme.
        let expected: BTreeSet<u8> = b.iter().filter(|x| !a.contains(x)).copied().collect();
        let got = diff(&digest_of(&a), &digest_of(&b));
        prop_assert_eq!(got, digest_of(&expected).entries.keys().cloned().collect::<BTreeSet<_>>());
    }

    #[test]
    fn sync_message_decode_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
        let _ = SyncMessage::decode(&bytes);
    }
}

#[test]
fn single_transfer_then_idempotent() {
    let a = store("hub-a");
    let b = store("hub-b");
    let x = teach(&a, "The poster studies sparrow calls in urban parks.", true);
    let before = a.snapshot_bytes().unwrap();

    let outcome = sync_round(&b, &mut LocalLink::new(&a)).unwrap();
    assert_eq!(outcome.received, 1);
    assert_eq!(outcome.pushed, 0);
    let got = b.get(&x).unwrap();
    let orig = a.get(&x).unwrap();
    assert_eq!(got.origin_hub, "hub-a");
    assert_eq!(got.version(), orig.version());
    assert!(got.shareable);
    assert_eq!(a.snapshot_bytes().unwrap(), before);

    let again = sync_round(&b, &mut LocalLink::new(&a)).unwrap();
    assert_eq!(again, SyncOutcome::default());
}

#[test]
fn push_reaches_peer() {
    let a = store("hub-a");
    let b = store("hub-b");
    let x = teach(&a, "Robots should greet visitors politely.", true);
    let outcome = sync_round(&a, &mut LocalLink::new(&b)).unwrap();
    assert_eq!(outcome.pushed, 1);
    assert!(b.contains(&x));
}

#[test]
fn private_chunk_never_on_wire() {
    let a = store("hub-a");
    let b = store("hub-b");
    let secret = teach(&a, "The unpublished result is forty two percent.", false);
    teach(&a, "Published results are on the poster.", true);
    teach(&b, "Hub b knows about plush toys.", true);
    let chunk = a.get(&secret).unwrap();
    let emb: Vec<u8> = chunk.embedding.values().iter().flat_map(|v| v.to_le_bytes()).collect();

    for direction in 0..2 {
        let (local, peer) = if direction == 0 { (&a, &b) } else { (&b, &a) };
        let mut link = LocalLink::new(peer);
        sync_round(local, &mut link).unwrap();
        for frame in &link.log {
            assert!(!contains(frame, secret.as_str().as_bytes()));
            assert!(!contains(frame, chunk.text.as_bytes()));
            assert!(!contains(frame, chunk.normalized_text.as_bytes()));
            assert!(!contains(frame, &emb));
        }
    }
    assert!(!b.contains(&secret));
}

#[test]
fn explicit_request_for_private_chunk_is_refused() {
    let a = store("hub-a");
    let secret = teach(&a, "Do not share this sentence.", false);
    let responder = SyncResponder::new(a);
    assert_eq!(responder.respond(SyncMessage::DiffRequest(vec![secret])), SyncMessage::Delta(vec![]));
}

/// A peer that answers with a forged delta.
struct ForgingLink {
    digest: SyncDigest,
    delta: Vec<KnowledgeChunk>,
}

impl PeerLink for ForgingLink {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, SyncError> {
        Ok(match SyncMessage::decode(request)? {
            SyncMessage::Digest(_) => SyncMessage::Digest(self.digest.clone()),
            SyncMessage::DiffRequest(_) => SyncMessage::Delta(self.delta.clone()),
            SyncMessage::Delta(_) => SyncMessage::Ack { accepted: 0 },
            _ => SyncMessage::Error("?".into()),
        }
        .encode())
    }
}

#[test]
fn consent_violation_is_rejected_and_round_continues() {
    let src = store("evil");
    let private = teach(&src, "Private chunk that claims nothing.", true);
    let honest = teach(&src, "Honest shareable chunk here.", true);
    let digest = make_digest(&src).unwrap();
    let mut forged = (*src.get(&private).unwrap()).clone();
    forged.shareable = false;
    let delta = vec![forged, (*src.get(&honest).unwrap()).clone()];

    let dst = store("victim");
    let outcome = sync_round(&dst, &mut ForgingLink { digest, delta }).unwrap();
    assert_eq!(outcome.received, 1);
    assert_eq!(
        outcome.rejected,
        vec![Rejection { chunk_id: private.to_string(), reason: RejectReason::ConsentViolation }]
    );
    assert!(dst.contains(&honest));
    assert!(!dst.contains(&private));
}

#[test]
fn tampered_ids_and_unrequested_chunks_are_rejected() {
    let src = store("evil");
    let a = teach(&src, "First sentence for tampering.", true);
    let b = teach(&src, "Second sentence never requested.", true);
    let mut digest = make_digest(&src).unwrap();
    digest.entries.remove(&b);
    let mut tampered = (*src.get(&a).unwrap()).clone();
    tampered.text = "Something else entirely.".into();
    let delta = vec![tampered, (*src.get(&b).unwrap()).clone()];

    let dst = store("victim");
    let outcome = sync_round(&dst, &mut ForgingLink { digest, delta }).unwrap();
    let reasons: Vec<RejectReason> = outcome.rejected.iter().map(|r| r.reason).collect();
    assert_eq!(reasons, vec![RejectReason::IdMismatch, RejectReason::Unrequested]);
    assert!(dst.is_empty());
}

#[test]
fn foreign_embedding_is_replaced_by_local_one() {
    let src = store("src");
    let id = teach(&src, "Embeddings may come from another model.", true);
    let mut chunk = (*src.get(&id).unwrap()).clone();
    let mut raw = vec![0.0; 64];
    raw[3] = 1.0;
    chunk.embedding = Embedding::from_raw(&raw).unwrap();
    let digest = make_digest(&src).unwrap();

    let dst = store("dst");
    sync_round(&dst, &mut ForgingLink { digest, delta: vec![chunk.clone()] }).unwrap();
    let stored = dst.get(&id).unwrap();
    let local = dst.embedder().embed(&chunk.normalized_text).unwrap();
    assert!(stored.embedding.bitwise_eq(&local));
    assert!(!stored.embedding.bitwise_eq(&chunk.embedding));
}

#[test]
fn failed_round_leaves_local_store_untouched() {
    // Messages: 0 digest, 1 digest, 2 diff, 3 delta, 4 push, 5 ack.
    for cut in 0..6 {
        let a = store("hub-a");
        let b = store("hub-b");
        teach(&a, "Alpha knows the first thing.", true);
        teach(&b, "Beta knows the second thing.", true);
        let mut link = LocalLink::new(&b);
        link.fail_at = Some(cut);
        assert!(matches!(sync_round(&a, &mut link), Err(SyncError::PeerUnreachable(_))));
        assert_eq!(a.len(), 1, "cut at {cut}");
        // The peer applies a pushed delta only once it has arrived whole.
        let expected_peer = if cut == 5 { 2 } else { 1 };
        assert_eq!(b.len(), expected_peer, "cut at {cut}");
    }
}

#[test]
fn deltas_commute_and_are_idempotent() {
    let src = store("src");
    let ids: Vec<ChunkId> = (0..6).map(|i| teach(&src, &format!("Shared sentence number {i}."), true)).collect();
    let chunks: Vec<KnowledgeChunk> = ids.iter().map(|id| (*src.get(id).unwrap()).clone()).collect();
    let (d1, d2) = (chunks[..4].to_vec(), chunks[2..].to_vec());

    let apply = |order: &[&Vec<KnowledgeChunk>]| {
        let s = store("dst");
        let responder = SyncResponder::new(Arc::clone(&s));
        for d in order {
            responder.respond(SyncMessage::Delta((*d).clone()));
        }
        s.chunks(None).unwrap().iter().map(|c| c.to_record_bytes()).collect::<Vec<_>>()
    };
    let ab = apply(&[&d1, &d2]);
    assert_eq!(ab, apply(&[&d2, &d1]));
    assert_eq!(ab, apply(&[&d1, &d2, &d1, &d2]));
    assert_eq!(ab.len(), 6);
}

#[test]
fn messages_round_trip() {
    let s = store("h");
    let id = teach(&s, "Frames carry whole records.", true);
    let msgs = vec![
        SyncMessage::Digest(make_digest(&s).unwrap()),
        SyncMessage::DiffRequest(vec![id.clone()]),
        SyncMessage::Delta(vec![(*s.get(&id).unwrap()).clone()]),
        SyncMessage::Ack { accepted: 3 },
        SyncMessage::Error("nope".into()),
    ];
    for m in msgs {
        let bytes = m.encode();
        assert_eq!(bytes[0], m.kind());
        assert_eq!(SyncMessage::decode(&bytes).unwrap(), m);
    }
    assert!(matches!(SyncMessage::decode(&wire::encode_raw(9, &[])), Err(SyncError::Protocol(_))));
}

#[test]
fn tcp_round_trip() {
    let a = store("hub-a");
    let b = store("hub-b");
    let x = teach(&a, "Sync also runs over sockets.", true);
    let y = teach(&b, "Sockets carry frames both ways.", true);
    let mut server = SyncServer::bind("127.0.0.1:0", SyncResponder::new(Arc::clone(&a))).unwrap();
    let mut link = TcpLink::connect(&server.local_addr().to_string(), Duration::from_secs(5)).unwrap();
    let outcome = sync_round(&b, &mut link).unwrap();
    assert_eq!((outcome.received, outcome.pushed), (1, 1));
    assert!(b.contains(&x) && a.contains(&y));
    server.stop();
}

#[test]
fn unreachable_peer() {
    let url = crate::testutil::dead_url();
    let addr = url.trim_start_matches("http://").trim_end_matches('/');
    let err = TcpLink::connect(addr, Duration::from_millis(500)).err().unwrap();
    assert!(matches!(err, SyncError::PeerUnreachable(_)));
}

struct RecordingConnector(Mutex<Vec<String>>);

impl PeerConnector for RecordingConnector {
    fn connect(&self, peer: &HubIdentity) -> Result<Box<dyn PeerLink>, SyncError> {
        self.0.lock().unwrap().push(peer.hub_id.clone());
        Err(SyncError::PeerUnreachable("test".into()))
    }
}

fn wait_for(mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while !cond() {
        assert!(Instant::now() < deadline, "timed out");
        std::thread::sleep(Duration::from_millis(2));
    }
}

#[test]
fn gossip_round_robin_and_stop() {
    let connector = Arc::new(RecordingConnector(Mutex::new(Vec::new())));
    let peers = PeerList::new(vec![HubIdentity::new("p1", "x"), HubIdentity::new("p2", "y")]);
    let mut handle = GossipHandle::spawn(store("me"), peers, Duration::from_millis(5), connector.clone(), None);
    wait_for(|| connector.0.lock().unwrap().len() >= 4);
    handle.stop();
    let seen = connector.0.lock().unwrap().clone();
    assert_eq!(seen[..4], ["p1", "p2", "p1", "p2"]);
    std::thread::sleep(Duration::from_millis(30));
    assert_eq!(connector.0.lock().unwrap().len(), seen.len());
}

#[test]
fn gossip_with_no_peers_does_nothing() {
    let connector = Arc::new(RecordingConnector(Mutex::new(Vec::new())));
    let mut handle =
        GossipHandle::spawn(store("me"), PeerList::default(), Duration::from_millis(2), connector.clone(), None);
    std::thread::sleep(Duration::from_millis(30));
    handle.stop();
    assert!(connector.0.lock().unwrap().is_empty());
}

#[test]
fn gossip_observer_sees_live_sync() {
    let a = store("hub-a");
    teach(&a, "Gossip spreads taught knowledge.", true);
    let server = SyncServer::bind("127.0.0.1:0", SyncResponder::new(Arc::clone(&a))).unwrap();
    let b = store("hub-b");
    let results = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&results);
    let observer: SyncObserver = Box::new(move |peer, r| {
        sink.lock().unwrap().push((peer.hub_id.clone(), r.as_ref().map(|o| o.received).ok()));
    });
    let peers = PeerList::new(vec![HubIdentity::new("hub-a", server.local_addr().to_string())]);
    let connector = Arc::new(TcpConnector { timeout: Duration::from_secs(2) });
    let mut handle = GossipHandle::spawn(Arc::clone(&b), peers, Duration::from_millis(5), connector, Some(observer));
    wait_for(|| results.lock().unwrap().len() >= 2);
    handle.stop();
    let r = results.lock().unwrap();
    assert_eq!(r[0], ("hub-a".to_string(), Some(1)));
    assert_eq!(r[1], ("hub-a".to_string(), Some(0)));
    assert_eq!(b.len(), 1);
}

#[test]
fn peer_list_upsert() {
    let peers = PeerList::default();
    peers.upsert(HubIdentity::new("a", "1"));
    peers.upsert(HubIdentity::new("b", "2"));
    peers.upsert(HubIdentity::new("a", "3"));
    assert_eq!(peers.snapshot(), vec![HubIdentity::new("a", "3"), HubIdentity::new("b", "2")]);
}

#[test]
fn sim_single_hub_converges_immediately() {
    let r = simulate(&SimConfig::new(1, Topology::Ring, 3)).unwrap();
    assert_eq!(r.convergence_round, Some(0));
    assert_eq!(r.messages, 0);
}

#[test]
fn sim_two_hubs_single_exchange() {
    let r = simulate(&SimConfig::new(2, Topology::Complete, 2)).unwrap();
    assert_eq!(r.convergence_round, Some(1));
    assert_eq!(r.rounds[0].shareable_sizes, vec![2, 2]);
}

/// Flooding on plain integer sets with the same round-robin rule: in round
/// r, hub i in index order merges with neighbour (r - 1) mod degree.
fn flooding_oracle(adj: &[Vec<usize>], max_rounds: usize) -> Option<usize> {
    let mut sets: Vec<BTreeSet<usize>> = (0..adj.len()).map(|i| BTreeSet::from([i])).collect();
    let equal = |s: &[BTreeSet<usize>]| s.iter().all(|x| *x == s[0]);
    if equal(&sets) {
        return Some(0);
    }
    for r in 1..=max_rounds {
        for i in 0..adj.len() {
            if adj[i].is_empty() {
                continue;
            }
            let j = adj[i][(r - 1) % adj[i].len()];
            let u: BTreeSet<usize> = sets[i].union(&sets[j]).copied().collect();
            sets[i] = u.clone();
            sets[j] = u;
        }
        if equal(&sets) {
            return Some(r);
        }
    }
    None
}

#[test]
fn sim_ring_matches_flooding_oracle() {
    for n in [3, 5, 10, 13] {
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut v = vec![(i + n - 1) % n, (i + 1) % n];
                v.sort_unstable();
                v
            })
            .collect();
        let expected = flooding_oracle(&adj, 50);
        let r = simulate(&SimConfig::new(n, Topology::Ring, 50)).unwrap();
        assert_eq!(r.convergence_round, expected, "n={n}");
        if n == 10 {
            assert!(r.convergence_round.unwrap() <= 10);
        }
        assert_eq!(r.rounds.last().unwrap().shareable_sizes, vec![n; n]);
    }
}

#[test]
fn sim_edges_matches_oracle_and_validates() {
    let edges = vec![(0, 1), (1, 2), (2, 3), (1, 4)];
    let mut adj = vec![Vec::new(); 5];
    for &(a, b) in &edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj.iter_mut().for_each(|v| v.sort_unstable());
    let r = simulate(&SimConfig::new(5, Topology::Edges(edges), 30)).unwrap();
    assert_eq!(r.convergence_round, flooding_oracle(&adj, 30));

    let bad = SimConfig::new(3, Topology::Edges(vec![(0, 3)]), 1);
    assert!(matches!(simulate(&bad), Err(SyncError::InvalidTopology(_))));
    let bad = SimConfig::new(3, Topology::Edges(vec![(1, 1)]), 1);
    assert!(matches!(simulate(&bad), Err(SyncError::InvalidTopology(_))));
    assert!(matches!("edges:0-x".parse::<Topology>(), Err(SyncError::InvalidTopology(_))));
    assert!(matches!("star".parse::<Topology>(), Err(SyncError::InvalidTopology(_))));
}

#[test]
fn sim_disconnected_never_converges() {
    let r = simulate(&SimConfig::new(4, Topology::Edges(vec![(0, 1), (2, 3)]), 10)).unwrap();
    assert_eq!(r.convergence_round, None);
}

#[test]
fn topology_strings_round_trip() {
    for t in [Topology::Ring, Topology::Complete, Topology::Random, Topology::Edges(vec![(0, 1), (2, 3)])] {
        assert_eq!(t.to_string().parse::<Topology>().unwrap(), t);
    }
}

#[test]
fn sim_is_seed_deterministic_and_monotone() {
    let mut cfg = SimConfig::new(6, Topology::Random, 25);
    cfg.drop_rate = 0.4;
    cfg.seed = 11;
    cfg.chunks_per_hub = 3;
    cfg.private_fraction = 0.5;
    let mut trace_a = Vec::new();
    let a = simulate_observed(&cfg, &mut |e| trace_a.push(e.bytes.len())).unwrap();
    let mut trace_b = Vec::new();
    let b = simulate_observed(&cfg, &mut |e| trace_b.push(e.bytes.len())).unwrap();
    assert_eq!(trace_a, trace_b);
    assert_eq!(a.rounds, b.rounds);
    assert_eq!((a.messages, a.bytes), (b.messages, b.bytes));
    assert_eq!(a.convergence_round, b.convergence_round);
    assert!(a.rounds.iter().any(|r| r.failed_syncs > 0));
    for w in a.rounds.windows(2) {
        for (x, y) in w[0].shareable_sizes.iter().zip(&w[1].shareable_sizes) {
            assert!(y >= x);
        }
    }
    assert_eq!(a.rejected, 0);
}

#[test]
fn sim_rejects_bad_config() {
    assert!(matches!(simulate(&SimConfig::new(0, Topology::Ring, 1)), Err(SyncError::InvalidConfig(_))));
    let mut cfg = SimConfig::new(2, Topology::Ring, 1);
    cfg.drop_rate = 1.5;
    assert!(matches!(simulate(&cfg), Err(SyncError::InvalidConfig(_))));
}
