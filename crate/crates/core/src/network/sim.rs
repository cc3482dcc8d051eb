use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{diff, make_digest, sync_round, PeerLink, SyncError, SyncResponder};
use crate::chunking::ChunkingPolicy;
use crate::embedder::ReferenceEmbedder;
use crate::store::{ChunkFilter, ChunkId, IngestOptions, KnowledgeChunk, KnowledgeStore};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Topology {
    /// Each hub linked to its two ring neighbours.
    Ring,
    Complete,
    /// Seeded random spanning tree plus extra edges; always connected.
    Random,
    /// Explicit undirected edges between hub indices.
    Edges(Vec<(usize, usize)>),
}

impl FromStr for Topology {
    type Err = SyncError;

    /// `ring`, `complete`, `random` or `edges:0-1,1-2`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring" => Ok(Topology::Ring),
            "complete" => Ok(Topology::Complete),
            "random" => Ok(Topology::Random),
            _ => {
                let list = s
                    .strip_prefix("edges:")
                    .ok_or_else(|| SyncError::InvalidTopology(format!("unknown topology {s:?}")))?;
                let mut edges = Vec::new();
                for pair in list.split(',').filter(|p| !p.is_empty()) {
                    let (a, b) = pair
                        .split_once('-')
                        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                        .ok_or_else(|| SyncError::InvalidTopology(format!("bad edge {pair:?}")))?;
                    edges.push((a, b));
                }
                Ok(Topology::Edges(edges))
            }
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Ring => f.write_str("ring"),
            Topology::Complete => f.write_str("complete"),
            Topology::Random => f.write_str("random"),
            Topology::Edges(edges) => {
                f.write_str("edges:")?;
                for (i, (a, b)) in edges.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{a}-{b}")?;
                }
                Ok(())
            }
        }
    }
}

const RANDOM_EXTRA_EDGE_PROB: f64 = 0.2;

/// Sorted neighbour lists for each hub.
fn neighbours(n: usize, topology: &Topology, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>, SyncError> {
    let mut adj = vec![BTreeSet::new(); n];
    let mut link = |a: usize, b: usize| {
        adj[a].insert(b);
        adj[b].insert(a);
    };
    match topology {
        Topology::Ring => {
            if n > 1 {
                for i in 0..n {
                    link(i, (i + 1) % n);
                }
            }
        }
        Topology::Complete => {
            for i in 0..n {
                for j in i + 1..n {
                    link(i, j);
                }
            }
        }
        Topology::Random => {
            for i in 1..n {
                let parent = rng.gen_range(0..i);
                link(i, parent);
            }
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(RANDOM_EXTRA_EDGE_PROB) {
                        link(i, j);
                    }
                }
            }
        }
        Topology::Edges(edges) => {
            for &(a, b) in edges {
                if a >= n || b >= n {
                    return Err(SyncError::InvalidTopology(format!("edge {a}-{b} references a hub outside 0..{n}")));
                }
                if a == b {
                    return Err(SyncError::InvalidTopology(format!("self-loop at hub {a}")));
                }
                link(a, b);
            }
        }
    }
    Ok(adj.into_iter().map(|s| s.into_iter().collect()).collect())
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub hubs: usize,
    pub topology: Topology,
    pub rounds: usize,
    /// Probability that a single hub-to-hub sync fails part way.
    pub drop_rate: f64,
    pub seed: u64,
    pub chunks_per_hub: usize,
    /// Probability that a seeded chunk is not shareable.
    pub private_fraction: f64,
    pub dimension: usize,
}

impl SimConfig {
    pub fn new(hubs: usize, topology: Topology, rounds: usize) -> Self {
        Self {
            hubs,
            topology,
            rounds,
            drop_rate: 0.0,
            seed: 0,
            chunks_per_hub: 1,
            private_fraction: 0.0,
            dimension: 64,
        }
    }

    fn validate(&self) -> Result<(), SyncError> {
        if self.hubs == 0 {
            return Err(SyncError::InvalidConfig("at least one hub is required".into()));
        }
        for (name, p) in [("drop_rate", self.drop_rate), ("private_fraction", self.private_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SyncError::InvalidConfig(format!("{name} must be within [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WireDirection {
    Request,
    Response,
}

/// One message on the simulated transport.
#[derive(Debug)]
pub struct WireEvent<'a> {
    pub round: usize,
    pub from: usize,
    pub to: usize,
    pub direction: WireDirection,
    pub bytes: &'a [u8],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundStats {
    pub round: usize,
    /// Shareable chunk count per hub after the round.
    pub shareable_sizes: Vec<usize>,
    pub received: usize,
    pub failed_syncs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub hubs: usize,
    pub topology: String,
    pub seed: u64,
    /// Distinct shareable chunks seeded across all hubs.
    pub union_size: usize,
    pub rounds: Vec<RoundStats>,
    pub messages: u64,
    pub bytes: u64,
    pub rejected: usize,
    /// First round after which every hub holds the same shareable set.
    pub convergence_round: Option<usize>,
    /// Non-shareable chunks that were seeded; they must never be on the wire.
    #[serde(skip)]
    pub withheld: Vec<KnowledgeChunk>,
}

struct SimLink<'a, 'o> {
    peer: &'a SyncResponder,
    round: usize,
    from: usize,
    to: usize,
    drop_at: Option<usize>,
    sent: usize,
    messages: &'a mut u64,
    bytes: &'a mut u64,
    observer: &'a mut (dyn FnMut(&WireEvent<'_>) + 'o),
}

impl SimLink<'_, '_> {
    fn transmit(&mut self, direction: WireDirection, bytes: &[u8]) -> Result<(), SyncError> {
        let (from, to) = match direction {
            WireDirection::Request => (self.from, self.to),
            WireDirection::Response => (self.to, self.from),
        };
        (self.observer)(&WireEvent { round: self.round, from, to, direction, bytes });
        *self.messages += 1;
        *self.bytes += bytes.len() as u64;
        let index = self.sent;
        self.sent += 1;
        if self.drop_at == Some(index) {
            return Err(SyncError::PeerUnreachable(format!("simulated drop of message {index}")));
        }
        Ok(())
    }
}

impl PeerLink for SimLink<'_, '_> {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, SyncError> {
        self.transmit(WireDirection::Request, request)?;
        let (kind, payload, _) = crate::wire::split_frame(request).map_err(|e| SyncError::Protocol(e.to_string()))?;
        let response = self.peer.respond_bytes(kind, payload);
        self.transmit(WireDirection::Response, &response)?;
        Ok(response)
    }
}

const WORDS: &[&str] = &[
    "acoustic", "bamboo", "cedar", "delta", "ember", "fjord", "granite", "harbor", "indigo", "juniper", "kelp",
    "lantern", "meadow", "nectar", "orbit", "pebble", "quartz", "ripple", "saffron", "tundra", "umber", "velvet",
    "willow", "zephyr",
];

fn shareable_ids(store: &KnowledgeStore) -> Result<BTreeSet<ChunkId>, SyncError> {
    Ok(store.chunks(Some(&ChunkFilter::shareable(true)))?.into_iter().map(|c| c.id.clone()).collect())
}

/// Runs a seeded gossip simulation over in-memory hubs.
///
/// ```
/// use infohub_core::network::{simulate, SimConfig, Topology};
/// let report = simulate(&SimConfig::new(2, Topology::Complete, 3)).unwrap();
/// assert_eq!(report.convergence_round, Some(1));
/// ```
pub fn simulate(config: &SimConfig) -> Result<SimReport, SyncError> {
    simulate_observed(config, &mut |_| {})
}

/// [`simulate`], reporting every message put on the simulated wire.
pub fn simulate_observed(config: &SimConfig, observer: &mut dyn FnMut(&WireEvent<'_>)) -> Result<SimReport, SyncError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adj = neighbours(config.hubs, &config.topology, &mut rng)?;
    let embedder =
        Arc::new(ReferenceEmbedder::new(config.dimension).map_err(|e| SyncError::InvalidConfig(e.to_string()))?);

    let mut hubs = Vec::with_capacity(config.hubs);
    let mut withheld = Vec::new();
    for i in 0..config.hubs {
        let store = Arc::new(KnowledgeStore::with_embedder(
            &format!("hub-{i:02}"),
            embedder.clone(),
            ChunkingPolicy::default(),
        )?);
        for k in 0..config.chunks_per_hub {
            let words: Vec<&str> = (0..6).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            let text = format!("Hub {i} note {k} mentions {}.", words.join(" "));
            let shareable = !rng.gen_bool(config.private_fraction);
            let ids = store.ingest(&text, &IngestOptions::session(format!("sim-{i}")).shared(shareable))?;
            if !shareable {
                withheld.extend(ids.iter().filter_map(|id| store.get(id)).map(|c| (*c).clone()));
            }
        }
        hubs.push(SyncResponder::new(store));
    }

    let mut union = BTreeSet::new();
    for hub in &hubs {
        union.extend(shareable_ids(hub.store())?);
    }

    let converged = |hubs: &[SyncResponder]| -> Result<bool, SyncError> {
        let first = shareable_ids(hubs[0].store())?;
        for hub in &hubs[1..] {
            if shareable_ids(hub.store())? != first {
                return Ok(false);
            }
        }
        Ok(true)
    };

    let mut report = SimReport {
        hubs: config.hubs,
        topology: config.topology.to_string(),
        seed: config.seed,
        union_size: union.len(),
        rounds: Vec::with_capacity(config.rounds),
        messages: 0,
        bytes: 0,
        rejected: 0,
        convergence_round: None,
        withheld,
    };
    if converged(&hubs)? {
        report.convergence_round = Some(0);
    }

    for round in 1..=config.rounds {
        let mut received = 0;
        let mut failed_syncs = 0;
        for i in 0..config.hubs {
            if adj[i].is_empty() {
                continue;
            }
            let j = adj[i][(round - 1) % adj[i].len()];
            let drop_at = if rng.gen_bool(config.drop_rate) {
                let mine = make_digest(hubs[i].store())?;
                let theirs = make_digest(hubs[j].store())?;
                let exchanged = 2
                    + 2 * usize::from(!diff(&mine, &theirs).is_empty())
                    + 2 * usize::from(!diff(&theirs, &mine).is_empty());
                Some(rng.gen_range(0..exchanged))
            } else {
                None
            };
            let mut link = SimLink {
                peer: &hubs[j],
                round,
                from: i,
                to: j,
                drop_at,
                sent: 0,
                messages: &mut report.messages,
                bytes: &mut report.bytes,
                observer: &mut *observer,
            };
            match sync_round(hubs[i].store(), &mut link) {
                Ok(outcome) => {
                    received += outcome.received + outcome.pushed;
                    report.rejected += outcome.rejected.len();
                }
                Err(SyncError::PeerUnreachable(_)) => failed_syncs += 1,
                Err(e) => return Err(e),
            }
        }
        let sizes = hubs.iter().map(|h| shareable_ids(h.store()).map(|s| s.len())).collect::<Result<Vec<_>, _>>()?;
        report.rounds.push(RoundStats { round, shareable_sizes: sizes, received, failed_syncs });
        if report.convergence_round.is_none() && converged(&hubs)? {
            report.convergence_round = Some(round);
        }
    }
    Ok(report)
}
