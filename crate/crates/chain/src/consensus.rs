//! Simulated PBFT ordering among `n = 3f + 1` in-process nodes.
//!
//! Time is logical: a seeded event queue delivers messages after a random
//! per-link delay and fires node timers, so a run is a pure function of its
//! configuration. The protocol is the three-phase normal case, a view change
//! that carries each node's highest prepared certificate, and a state
//! transfer for nodes that fall behind. There is no pipelining: a leader
//! proposes sequence `s + 1` only after it has committed `s`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::Hash32;
use crate::tx::Transaction;

pub type NodeId = usize;

/// An ordered unit of transactions; a committed batch becomes a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub id: u64,
    pub txs: Vec<Transaction>,
}

impl Batch {
    pub fn digest(&self) -> Hash32 {
        Hash32::digest(&self.to_canonical_bytes().expect("batched transactions are encodable"))
    }
}

impl Canonical for Batch {
    fn encode_into(&self, enc: &mut Encoder) -> Result<(), CodecError> {
        enc.u64(self.id);
        enc.len("txs", self.txs.len())?;
        for tx in &self.txs {
            enc.bytes("tx", &tx.to_canonical_bytes()?)?;
        }
        Ok(())
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Batch {
            id: dec.u64()?,
            txs: dec.seq(|d| Transaction::from_canonical_bytes(&d.bytes()?))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    #[default]
    Honest,
    /// Sends and processes nothing.
    Crash,
    /// As leader, sends conflicting proposals and votes to different peers.
    Equivocate,
}

/// Which nodes misbehave; the rest are honest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultSpec {
    pub crash: Vec<NodeId>,
    pub equivocate: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PbftConfig {
    pub n: usize,
    pub f: usize,
    pub seed: u64,
    /// Per-message delay bounds in logical ms, drawn uniformly.
    pub min_delay: u64,
    pub max_delay: u64,
    pub drop_probability: f64,
    /// Silence (ms) after which a node with pending work asks for a view
    /// change; doubles for each consecutive failed view change.
    pub view_timeout: u64,
    pub faults: FaultSpec,
    pub max_steps: u64,
    /// Keep a per-message trace.
    pub trace: bool,
}

impl Default for PbftConfig {
    fn default() -> Self {
        Self {
            n: 4,
            f: 1,
            seed: 0,
            min_delay: 1,
            max_delay: 10,
            drop_probability: 0.0,
            view_timeout: 200,
            faults: FaultSpec::default(),
            max_steps: 200_000,
            trace: true,
        }
    }
}

impl PbftConfig {
    pub fn behavior(&self, node: NodeId) -> Behavior {
        if self.faults.crash.contains(&node) {
            Behavior::Crash
        } else if self.faults.equivocate.contains(&node) {
            Behavior::Equivocate
        } else {
            Behavior::Honest
        }
    }

    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }

    fn check(&self) -> Result<(), ConsensusError> {
        if self.n != 3 * self.f + 1 || self.f == 0 {
            return Err(ConsensusError::InvalidConfig(format!(
                "need n = 3f + 1 with f >= 1, got n = {}, f = {}",
                self.n, self.f
            )));
        }
        if self.min_delay > self.max_delay || self.max_delay == 0 {
            return Err(ConsensusError::InvalidConfig("delay bounds must satisfy 0 < max, min <= max".into()));
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(ConsensusError::InvalidConfig("drop probability must be in [0, 1)".into()));
        }
        if self.view_timeout < 4 {
            return Err(ConsensusError::InvalidConfig("view timeout must be at least 4 ms".into()));
        }
        for &node in self.faults.crash.iter().chain(&self.faults.equivocate) {
            if node >= self.n {
                return Err(ConsensusError::InvalidConfig(format!("fault on unknown node {node}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedCert {
    pub view: u64,
    pub seq: u64,
    pub digest: Hash32,
    pub batch: Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub seq: u64,
    pub digest: Hash32,
    pub batch: Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Message {
    PrePrepare {
        view: u64,
        seq: u64,
        digest: Hash32,
        batch: Batch,
    },
    Prepare {
        view: u64,
        seq: u64,
        digest: Hash32,
    },
    Commit {
        view: u64,
        seq: u64,
        digest: Hash32,
    },
    ViewChange {
        new_view: u64,
        last_committed: u64,
        prepared: Option<PreparedCert>,
    },
    NewView {
        view: u64,
        proposal: Option<Proposal>,
    },
    SyncRequest {
        from_seq: u64,
    },
    SyncReply {
        seq: u64,
        digest: Hash32,
        batch: Batch,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::PrePrepare { .. } => "pre-prepare",
            Message::Prepare { .. } => "prepare",
            Message::Commit { .. } => "commit",
            Message::ViewChange { .. } => "view-change",
            Message::NewView { .. } => "new-view",
            Message::SyncRequest { .. } => "sync-request",
            Message::SyncReply { .. } => "sync-reply",
        }
    }

    fn view(&self) -> Option<u64> {
        match self {
            Message::PrePrepare { view, .. }
            | Message::Prepare { view, .. }
            | Message::Commit { view, .. }
            | Message::NewView { view, .. } => Some(*view),
            Message::ViewChange { new_view, .. } => Some(*new_view),
            _ => None,
        }
    }

    fn seq(&self) -> Option<u64> {
        match self {
            Message::PrePrepare { seq, .. }
            | Message::Prepare { seq, .. }
            | Message::Commit { seq, .. }
            | Message::SyncReply { seq, .. } => Some(*seq),
            Message::NewView { proposal, .. } => proposal.as_ref().map(|p| p.seq),
            Message::SyncRequest { from_seq } => Some(*from_seq),
            Message::ViewChange { .. } => None,
        }
    }

    fn digest(&self) -> Option<Hash32> {
        match self {
            Message::PrePrepare { digest, .. }
            | Message::Prepare { digest, .. }
            | Message::Commit { digest, .. }
            | Message::SyncReply { digest, .. } => Some(*digest),
            Message::NewView { proposal, .. } => proposal.as_ref().map(|p| p.digest),
            Message::ViewChange { prepared, .. } => prepared.as_ref().map(|c| c.digest),
            Message::SyncRequest { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: NodeId,
    pub msg: Message,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommittedEntry {
    pub seq: u64,
    pub digest: Hash32,
    pub batch_id: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsensusError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("node {node} is not the leader of view {view}")]
    NotLeader { node: NodeId, view: u64 },
    #[error("node {node} is crashed")]
    Crashed { node: NodeId },
    #[error("no progress after {steps} steps: {reason}")]
    Stalled {
        steps: u64,
        reason: String,
        report: Box<RunReport>,
    },
}

/// One replica's protocol state.
#[derive(Debug, Clone)]
pub struct OrdererNode {
    pub id: NodeId,
    pub behavior: Behavior,
    n: usize,
    f: usize,
    view_timeout: u64,
    pub view: u64,
    /// Target view while a view change is in progress.
    view_change: Option<u64>,
    vc_started: u64,
    vc_attempts: u32,
    next_seq: u64,
    last_progress: u64,
    committed: Vec<CommittedEntry>,
    committed_batches: BTreeMap<u64, Batch>,
    pending: Vec<Batch>,
    known: BTreeMap<Hash32, Batch>,
    preprepared: BTreeMap<(u64, u64), Hash32>,
    prepares: BTreeMap<(u64, u64, Hash32), BTreeSet<NodeId>>,
    commits: BTreeMap<(u64, u64, Hash32), BTreeSet<NodeId>>,
    sent_prepare: BTreeSet<(u64, u64)>,
    sent_commit: BTreeSet<(u64, u64)>,
    prepared_certs: BTreeMap<u64, PreparedCert>,
    view_changes: BTreeMap<u64, BTreeMap<NodeId, (u64, Option<PreparedCert>)>>,
    new_view_sent: BTreeSet<u64>,
    sync_votes: BTreeMap<(u64, Hash32), BTreeSet<NodeId>>,
    sync_requested: Option<u64>,
    stashed: BTreeMap<u64, Vec<Proposal>>,
    rng: ChaCha8Rng,
    pub equivocations_flagged: u64,
    pub malformed: u64,
}

impl OrdererNode {
    pub fn new(id: NodeId, config: &PbftConfig) -> Self {
        Self {
            id,
            behavior: config.behavior(id),
            n: config.n,
            f: config.f,
            view_timeout: config.view_timeout,
            view: 0,
            view_change: None,
            vc_started: 0,
            vc_attempts: 0,
            next_seq: 1,
            last_progress: 0,
            committed: Vec::new(),
            committed_batches: BTreeMap::new(),
            pending: Vec::new(),
            known: BTreeMap::new(),
            preprepared: BTreeMap::new(),
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            sent_prepare: BTreeSet::new(),
            sent_commit: BTreeSet::new(),
            prepared_certs: BTreeMap::new(),
            view_changes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            sync_votes: BTreeMap::new(),
            sync_requested: None,
            stashed: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(id as u64 + 1))),
            equivocations_flagged: 0,
            malformed: 0,
        }
    }

    pub fn leader_of(&self, view: u64) -> NodeId {
        (view % self.n as u64) as NodeId
    }

    pub fn is_leader(&self) -> bool {
        self.leader_of(self.view) == self.id
    }

    fn quorum(&self) -> usize {
        2 * self.f + 1
    }

    pub fn committed(&self) -> &[CommittedEntry] {
        &self.committed
    }

    /// Committed batches in sequence order.
    pub fn committed_batches(&self) -> impl Iterator<Item = &Batch> {
        self.committed_batches.values()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn in_view_change(&self) -> bool {
        self.view_change.is_some()
    }

    fn broadcast(&self, msg: Message) -> Vec<Outbound> {
        (0..self.n)
            .filter(|&j| j != self.id)
            .map(|to| Outbound { to, msg: msg.clone() })
            .collect()
    }

    /// Queues a client batch for ordering.
    pub fn submit(&mut self, batch: Batch, now: u64) -> Vec<Outbound> {
        if self.behavior == Behavior::Crash {
            return Vec::new();
        }
        if self.pending.is_empty() {
            self.last_progress = now;
        }
        if !self.committed_batches.values().any(|b| b.id == batch.id) && !self.pending.iter().any(|b| b.id == batch.id) {
            self.pending.push(batch);
        }
        self.progress(now)
    }

    /// Leader-only: assigns the next sequence number to `batch`.
    pub fn propose(&mut self, batch: Batch) -> Result<Vec<Outbound>, ConsensusError> {
        if self.behavior == Behavior::Crash {
            return Err(ConsensusError::Crashed { node: self.id });
        }
        if !self.is_leader() || self.view_change.is_some() {
            return Err(ConsensusError::NotLeader {
                node: self.id,
                view: self.view,
            });
        }
        let (view, seq) = (self.view, self.next_seq);
        let digest = batch.digest();
        self.known.insert(digest, batch.clone());
        self.preprepared.insert((view, seq), digest);
        self.prepares.entry((view, seq, digest)).or_default().insert(self.id);
        if self.behavior == Behavior::Equivocate {
            return Ok(self.equivocate(view, seq, batch, digest));
        }
        Ok(self.broadcast(Message::PrePrepare { view, seq, digest, batch }))
    }

    /// Splits the other replicas into two camps and tells each camp a
    /// different story, proposal and votes alike. Every replica also gets
    /// the other camp's proposal, so delivery order decides what it sees
    /// first.
    fn equivocate(&mut self, view: u64, seq: u64, batch: Batch, digest: Hash32) -> Vec<Outbound> {
        let mut alt = batch.clone();
        if alt.txs.len() > 1 {
            alt.txs.pop();
        } else {
            alt.id ^= 1 << 63;
        }
        let alt_digest = alt.digest();
        self.known.insert(alt_digest, alt.clone());
        let mut others: Vec<NodeId> = (0..self.n).filter(|&j| j != self.id).collect();
        others.shuffle(&mut self.rng);
        let split = self.rng.random_range(1..others.len());
        self.sent_prepare.insert((view, seq));
        self.sent_commit.insert((view, seq));
        let mut out = Vec::new();
        for (i, &to) in others.iter().enumerate() {
            let (first, second) = if i < split {
                ((digest, &batch), (alt_digest, &alt))
            } else {
                ((alt_digest, &alt), (digest, &batch))
            };
            for (d, b) in [first, second] {
                out.push(Outbound {
                    to,
                    msg: Message::PrePrepare {
                        view,
                        seq,
                        digest: d,
                        batch: b.clone(),
                    },
                });
            }
            out.push(Outbound {
                to,
                msg: Message::Prepare {
                    view,
                    seq,
                    digest: first.0,
                },
            });
            out.push(Outbound {
                to,
                msg: Message::Commit {
                    view,
                    seq,
                    digest: first.0,
                },
            });
        }
        out
    }

    pub fn handle_message(&mut self, from: NodeId, msg: Message, now: u64) -> Vec<Outbound> {
        if self.behavior == Behavior::Crash {
            return Vec::new();
        }
        if from >= self.n || from == self.id {
            self.malformed += 1;
            return Vec::new();
        }
        let mut out = Vec::new();
        match msg {
            Message::PrePrepare {
                view,
                seq,
                digest,
                batch,
            } => {
                if from != self.leader_of(view) || batch.digest() != digest {
                    self.malformed += 1;
                    return out;
                }
                if view > self.view || (view == self.view && self.view_change.is_some()) {
                    // proposals can overtake the new-view message that
                    // announces their view
                    self.stashed.entry(view).or_default().push(Proposal { seq, digest, batch });
                    return out;
                }
                if view < self.view {
                    return out;
                }
                self.accept_preprepare(view, seq, digest, batch, from);
            }
            Message::Prepare { view, seq, digest } => {
                self.prepares.entry((view, seq, digest)).or_default().insert(from);
            }
            Message::Commit { view, seq, digest } => {
                self.commits.entry((view, seq, digest)).or_default().insert(from);
            }
            Message::ViewChange {
                new_view,
                last_committed,
                prepared,
            } => {
                if let Some(c) = &prepared {
                    if c.batch.digest() != c.digest {
                        self.malformed += 1;
                        return out;
                    }
                }
                if new_view <= self.view {
                    return out;
                }
                self.view_changes
                    .entry(new_view)
                    .or_default()
                    .insert(from, (last_committed, prepared));
                out.extend(self.on_view_change_votes(now));
            }
            Message::NewView { view, proposal } => {
                if from != self.leader_of(view) {
                    self.malformed += 1;
                    return out;
                }
                if let Some(p) = &proposal {
                    if p.batch.digest() != p.digest {
                        self.malformed += 1;
                        return out;
                    }
                }
                if view < self.view || (view == self.view && self.view_change.is_none()) {
                    return out;
                }
                self.enter_view(view, now);
                if let Some(p) = proposal {
                    self.accept_preprepare(view, p.seq, p.digest, p.batch, from);
                }
                for p in self.stashed.remove(&view).unwrap_or_default() {
                    self.accept_preprepare(view, p.seq, p.digest, p.batch, from);
                }
            }
            Message::SyncRequest { from_seq } => {
                for (seq, batch) in self.committed_batches.range(from_seq..) {
                    out.push(Outbound {
                        to: from,
                        msg: Message::SyncReply {
                            seq: *seq,
                            digest: batch.digest(),
                            batch: batch.clone(),
                        },
                    });
                }
                return out;
            }
            Message::SyncReply { seq, digest, batch } => {
                if batch.digest() != digest {
                    self.malformed += 1;
                    return out;
                }
                self.known.insert(digest, batch);
                self.sync_votes.entry((seq, digest)).or_default().insert(from);
            }
        }
        out.extend(self.progress(now));
        out
    }

    fn accept_preprepare(&mut self, view: u64, seq: u64, digest: Hash32, batch: Batch, leader: NodeId) {
        if seq < self.next_seq {
            return;
        }
        match self.preprepared.get(&(view, seq)) {
            Some(d) if *d != digest => {
                self.equivocations_flagged += 1;
                log::debug!("node {} flags conflicting proposals at ({view}, {seq})", self.id);
            }
            Some(_) => {}
            None => {
                self.known.insert(digest, batch);
                self.preprepared.insert((view, seq), digest);
                self.prepares.entry((view, seq, digest)).or_default().insert(leader);
            }
        }
    }

    fn enter_view(&mut self, view: u64, now: u64) {
        self.view = view;
        self.view_change = None;
        self.vc_attempts = 0;
        self.last_progress = now;
        self.view_changes.retain(|v, _| *v > view);
        self.stashed.retain(|v, _| *v >= view);
    }

    fn start_view_change(&mut self, target: u64, now: u64) -> Vec<Outbound> {
        self.view_change = Some(target);
        self.vc_started = now;
        self.vc_attempts += 1;
        let last_committed = self.next_seq - 1;
        let prepared = self.prepared_certs.get(&self.next_seq).cloned();
        self.view_changes
            .entry(target)
            .or_default()
            .insert(self.id, (last_committed, prepared.clone()));
        let mut out = self.broadcast(Message::ViewChange {
            new_view: target,
            last_committed,
            prepared,
        });
        out.extend(self.on_view_change_votes(now));
        out
    }

    fn on_view_change_votes(&mut self, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        // join a view change that f + 1 peers already want
        let current = self.view_change.unwrap_or(self.view);
        let mut ahead: BTreeMap<NodeId, u64> = BTreeMap::new();
        for (&v, votes) in self.view_changes.range(current + 1..) {
            for &j in votes.keys() {
                ahead.entry(j).or_insert(v);
            }
        }
        if ahead.len() > self.f {
            let target = *ahead.values().min().expect("non-empty");
            out.extend(self.start_view_change(target, now));
            return out;
        }
        let candidates: Vec<u64> = self
            .view_changes
            .iter()
            .filter(|(v, votes)| {
                **v > self.view
                    && votes.len() >= self.quorum()
                    && self.leader_of(**v) == self.id
                    && !self.new_view_sent.contains(v)
            })
            .map(|(v, _)| *v)
            .collect();
        if let Some(v) = candidates.into_iter().max() {
            out.extend(self.try_new_view(v, now));
        }
        out
    }

    fn try_new_view(&mut self, view: u64, now: u64) -> Vec<Outbound> {
        let votes = &self.view_changes[&view];
        let max_lc = votes.values().map(|(lc, _)| *lc).max().unwrap_or(0);
        let own_lc = self.next_seq - 1;
        if own_lc < max_lc {
            // catch up before leading; progress() retries afterwards
            return self.request_sync();
        }
        let seq = self.next_seq;
        let cert = votes
            .values()
            .filter_map(|(_, c)| c.as_ref())
            .filter(|c| c.seq == seq)
            .max_by_key(|c| c.view)
            .cloned();
        let batch = match cert {
            Some(c) => Some(c.batch),
            None => self.pending.first().cloned(),
        };
        self.new_view_sent.insert(view);
        self.enter_view(view, now);
        let proposal = batch.map(|batch| {
            let digest = batch.digest();
            self.known.insert(digest, batch.clone());
            self.preprepared.insert((view, seq), digest);
            self.prepares.entry((view, seq, digest)).or_default().insert(self.id);
            Proposal { seq, digest, batch }
        });
        self.broadcast(Message::NewView { view, proposal })
    }

    fn request_sync(&mut self) -> Vec<Outbound> {
        if self.sync_requested == Some(self.next_seq) {
            return Vec::new();
        }
        self.sync_requested = Some(self.next_seq);
        self.broadcast(Message::SyncRequest { from_seq: self.next_seq })
    }

    fn commit(&mut self, digest: Hash32, now: u64) {
        let batch = self.known[&digest].clone();
        let seq = self.next_seq;
        self.committed.push(CommittedEntry {
            seq,
            digest,
            batch_id: batch.id,
        });
        self.pending.retain(|b| b.id != batch.id);
        self.committed_batches.insert(seq, batch);
        self.prepared_certs.remove(&seq);
        self.next_seq += 1;
        self.last_progress = now;
        self.sync_requested = None;
        // votes for finished sequence numbers are dead weight
        self.prepares.retain(|(_, s, _), _| *s > seq);
        self.commits.retain(|(_, s, _), _| *s > seq);
        self.sync_votes.retain(|(s, _), _| *s > seq);
        self.preprepared.retain(|(_, s), _| *s > seq);
    }

    /// Advances the normal-case protocol as far as the collected votes allow.
    fn progress(&mut self, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        loop {
            let (view, seq) = (self.view, self.next_seq);
            if self.view_change.is_none() {
                if let Some(&digest) = self.preprepared.get(&(view, seq)) {
                    if !self.sent_prepare.contains(&(view, seq)) && !self.is_leader() {
                        self.sent_prepare.insert((view, seq));
                        self.prepares.entry((view, seq, digest)).or_default().insert(self.id);
                        out.extend(self.broadcast(Message::Prepare { view, seq, digest }));
                    }
                    let prepared = self.prepares.get(&(view, seq, digest)).map_or(0, BTreeSet::len) >= self.quorum();
                    if prepared {
                        let newer = self.prepared_certs.get(&seq).is_none_or(|c| c.view < view);
                        if newer {
                            self.prepared_certs.insert(
                                seq,
                                PreparedCert {
                                    view,
                                    seq,
                                    digest,
                                    batch: self.known[&digest].clone(),
                                },
                            );
                        }
                        if !self.sent_commit.contains(&(view, seq)) {
                            self.sent_commit.insert((view, seq));
                            self.commits.entry((view, seq, digest)).or_default().insert(self.id);
                            out.extend(self.broadcast(Message::Commit { view, seq, digest }));
                        }
                    }
                }
            }
            // 2f + 1 commits in any view fix the digest for this sequence;
            // f + 1 matching sync replies include at least one honest one
            let committed = self
                .commits
                .iter()
                .find(|((_, s, _), votes)| *s == seq && votes.len() >= self.quorum())
                .map(|((_, _, d), _)| *d);
            let synced = self
                .sync_votes
                .iter()
                .find(|((s, _), votes)| *s == seq && votes.len() > self.f)
                .map(|((_, d), _)| *d);
            match committed.or(synced) {
                Some(d) if self.known.contains_key(&d) => {
                    self.commit(d, now);
                    continue;
                }
                Some(_) => out.extend(self.request_sync()),
                None => {}
            }
            break;
        }
        // evidence of a later sequence means this node missed commits
        let behind = self.preprepared.keys().any(|(_, s)| *s > self.next_seq)
            || self.commits.keys().any(|(_, s, _)| *s > self.next_seq);
        if behind {
            out.extend(self.request_sync());
        }
        if self.view_change.is_none()
            && self.is_leader()
            && !self.preprepared.contains_key(&(self.view, self.next_seq))
        {
            if let Some(batch) = self.pending.first().cloned() {
                out.extend(self.propose(batch).expect("leader outside a view change"));
            }
        }
        let owed: Vec<u64> = self
            .view_changes
            .iter()
            .filter(|(v, votes)| {
                **v > self.view
                    && votes.len() >= self.quorum()
                    && self.leader_of(**v) == self.id
                    && !self.new_view_sent.contains(v)
            })
            .map(|(v, _)| *v)
            .collect();
        if let Some(v) = owed.into_iter().max() {
            let max_lc = self.view_changes[&v].values().map(|(lc, _)| *lc).max().unwrap_or(0);
            if self.next_seq - 1 >= max_lc {
                out.extend(self.try_new_view(v, now));
            }
        }
        out
    }

    /// Timer tick: starts or escalates a view change when the node has
    /// waited too long for progress.
    pub fn on_timer(&mut self, now: u64) -> Vec<Outbound> {
        if self.behavior == Behavior::Crash {
            return Vec::new();
        }
        match self.view_change {
            Some(target) => {
                let wait = self.view_timeout << self.vc_attempts.min(16);
                if now.saturating_sub(self.vc_started) >= wait {
                    return self.start_view_change(target + 1, now);
                }
            }
            None if self.has_pending() => {
                if now.saturating_sub(self.last_progress) >= self.view_timeout {
                    return self.start_view_change(self.view + 1, now);
                }
                // re-ask for missed state in case replies were dropped
                if self.sync_requested.is_some() {
                    self.sync_requested = None;
                    return self.progress(now);
                }
            }
            None => {}
        }
        Vec::new()
    }

    fn wants_timer(&self) -> bool {
        self.behavior != Behavior::Crash && (self.has_pending() || self.view_change.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub time: u64,
    pub event: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from: Option<NodeId>,
    pub to: NodeId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub digest: Option<Hash32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub completed: bool,
    pub steps: u64,
    /// Logical time at the end of the run, ms.
    pub elapsed: u64,
    pub behaviors: Vec<Behavior>,
    pub committed: Vec<Vec<CommittedEntry>>,
    /// Highest view reached by any honest node.
    pub view_changes: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub equivocations_flagged: u64,
    pub malformed: u64,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
    #[serde(skip)]
    pub batches: Vec<Vec<Batch>>,
}

impl RunReport {
    pub fn honest_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.behaviors
            .iter()
            .enumerate()
            .filter(|(_, b)| **b == Behavior::Honest)
            .map(|(i, _)| i)
    }

    /// Sequence numbers at which two honest nodes committed different digests.
    pub fn safety_violations(&self) -> Vec<u64> {
        let mut by_seq: BTreeMap<u64, BTreeSet<Hash32>> = BTreeMap::new();
        for node in self.honest_nodes() {
            for e in &self.committed[node] {
                by_seq.entry(e.seq).or_default().insert(e.digest);
            }
        }
        by_seq.into_iter().filter(|(_, d)| d.len() > 1).map(|(s, _)| s).collect()
    }

    /// The trace as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.trace {
            s.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            s.push('\n');
        }
        s
    }
}

enum Event {
    Deliver { from: NodeId, to: NodeId, msg: Message },
    Timer { node: NodeId },
}

/// The deterministic network: nodes, an event queue and a seeded RNG.
pub struct NetworkSim {
    config: PbftConfig,
    pub nodes: Vec<OrdererNode>,
    queue: BTreeMap<(u64, u64), Event>,
    order: u64,
    now: u64,
    steps: u64,
    rng: ChaCha8Rng,
    timer_armed: Vec<bool>,
    sent: u64,
    dropped: u64,
    trace: Vec<TraceEvent>,
}

impl NetworkSim {
    pub fn new(config: PbftConfig) -> Result<Self, ConsensusError> {
        config.check()?;
        let nodes = (0..config.n).map(|i| OrdererNode::new(i, &config)).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            timer_armed: vec![false; config.n],
            nodes,
            config,
            queue: BTreeMap::new(),
            order: 0,
            now: 0,
            steps: 0,
            sent: 0,
            dropped: 0,
            trace: Vec::new(),
        })
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.queue.insert((at, self.order), event);
        self.order += 1;
    }

    fn record(&mut self, event: &str, from: Option<NodeId>, to: NodeId, msg: Option<&Message>) {
        if !self.config.trace {
            return;
        }
        self.trace.push(TraceEvent {
            step: self.steps,
            time: self.now,
            event: event.to_string(),
            from,
            to,
            kind: msg.map(|m| m.kind().to_string()),
            view: msg.and_then(Message::view),
            seq: msg.and_then(Message::seq),
            digest: msg.and_then(Message::digest),
        });
    }

    fn send(&mut self, from: NodeId, out: Vec<Outbound>) {
        for Outbound { to, msg } in out {
            self.sent += 1;
            if self.config.drop_probability > 0.0 && self.rng.random_bool(self.config.drop_probability) {
                self.dropped += 1;
                self.record("drop", Some(from), to, Some(&msg));
                continue;
            }
            let delay = self.rng.random_range(self.config.min_delay..=self.config.max_delay);
            self.schedule(self.now + delay, Event::Deliver { from, to, msg });
        }
        self.arm_timers();
    }

    fn arm_timers(&mut self) {
        let tick = (self.config.view_timeout / 4).max(1);
        for i in 0..self.nodes.len() {
            if !self.timer_armed[i] && self.nodes[i].wants_timer() {
                self.timer_armed[i] = true;
                self.schedule(self.now + tick, Event::Timer { node: i });
            }
        }
    }

    /// Hands every batch to every node, as clients broadcast requests.
    pub fn submit(&mut self, batches: &[Batch]) {
        for batch in batches {
            for i in 0..self.nodes.len() {
                let out = self.nodes[i].submit(batch.clone(), self.now);
                self.send(i, out);
            }
        }
    }

    fn done(&self) -> bool {
        self.nodes
            .iter()
            .filter(|n| n.behavior == Behavior::Honest)
            .all(|n| !n.has_pending())
    }

    /// Processes one event; returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((at, _), event)) = self.queue.pop_first() else {
            return false;
        };
        self.now = at;
        self.steps += 1;
        match event {
            Event::Deliver { from, to, msg } => {
                self.record("deliver", Some(from), to, Some(&msg));
                let out = self.nodes[to].handle_message(from, msg, self.now);
                self.send(to, out);
            }
            Event::Timer { node } => {
                self.timer_armed[node] = false;
                let out = self.nodes[node].on_timer(self.now);
                if !out.is_empty() {
                    self.record("timeout", None, node, None);
                }
                self.send(node, out);
            }
        }
        true
    }

    fn report(&mut self, completed: bool) -> RunReport {
        let honest = self.nodes.iter().filter(|n| n.behavior == Behavior::Honest);
        RunReport {
            completed,
            steps: self.steps,
            elapsed: self.now,
            behaviors: self.nodes.iter().map(|n| n.behavior).collect(),
            committed: self.nodes.iter().map(|n| n.committed.clone()).collect(),
            view_changes: honest.map(|n| n.view).max().unwrap_or(0),
            messages_sent: self.sent,
            messages_dropped: self.dropped,
            equivocations_flagged: self.nodes.iter().map(|n| n.equivocations_flagged).sum(),
            malformed: self.nodes.iter().map(|n| n.malformed).sum(),
            trace: std::mem::take(&mut self.trace),
            batches: self
                .nodes
                .iter()
                .map(|n| n.committed_batches().cloned().collect())
                .collect(),
        }
    }

    /// Runs until every honest node has committed every submitted batch.
    pub fn run_to_completion(&mut self) -> Result<RunReport, ConsensusError> {
        loop {
            if self.done() {
                return Ok(self.report(true));
            }
            if self.steps >= self.config.max_steps {
                let steps = self.steps;
                return Err(ConsensusError::Stalled {
                    steps,
                    reason: "step budget exhausted before every batch committed".into(),
                    report: Box::new(self.report(false)),
                });
            }
            if !self.step() {
                let steps = self.steps;
                return Err(ConsensusError::Stalled {
                    steps,
                    reason: "no events left to process".into(),
                    report: Box::new(self.report(false)),
                });
            }
        }
    }
}

/// Orders `batches` on a fresh simulated network.
pub fn run(config: &PbftConfig, batches: &[Batch]) -> Result<RunReport, ConsensusError> {
    let mut sim = NetworkSim::new(config.clone())?;
    sim.submit(batches);
    sim.run_to_completion()
}
