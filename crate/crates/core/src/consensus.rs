//! The per-height replica state machine: proposal, collector-mediated
//! Prepare/Commit aggregation, locking, timeouts, linear view change, leader
//! selection, and finalization.
//!
//! A replica is a deterministic event handler. It owns no clock and no
//! network: the simulator injects messages and timer firings, and the replica
//! returns the messages it wants sent. The collector for the Prepare, Commit,
//! and NewView gathers is the round's leader. Collectors count their own
//! contribution locally, without a self-transmission.
//!
//! Prepare shares sign a digest binding height, round, and block hash, so a
//! certificate formed in one round cannot be presented as one for another.
//! Commit shares sign a round-free digest and are cast only in the voter's
//! current round; lock updates also accept certificates from other rounds.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Encoder;
use crate::cosi::AggregationTree;
use crate::crypto::{self, MultiSignature, Signature, ThresholdKeySet, ThresholdSignature};
use crate::types::{
    hash_block, Block, HashDigest, NodeId, ParticipantSet, ProposalAttestation, SlashEvidence,
    Transaction,
};

/// Round index within a height, starting at 1.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
pub struct Round(pub u32);

impl Round {
    pub const FIRST: Round = Round(1);

    pub fn next(self) -> Round {
        Round(self.0 + 1)
    }
}

/// Leader rotation scheme.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderMode {
    /// Sampling with replacement: `vrf(seed | round) mod n`.
    Modular,
    /// Seeded Fisher-Yates permutation of the members, walked round-robin.
    /// Bounds consecutive malicious leaders by f within a height.
    Permutation,
}

/// Deterministic leader for a round given the height's seed. Identical across
/// all honest replicas holding the same seed.
pub fn leader_for(
    round: Round,
    seed: &HashDigest,
    set: &ParticipantSet,
    mode: LeaderMode,
) -> NodeId {
    match mode {
        LeaderMode::Modular => {
            let idx = crypto::vrf_from_seed(seed, round.0 as u64).as_u64() % set.n() as u64;
            set.members[idx as usize]
        }
        LeaderMode::Permutation => {
            let perm = leader_permutation(seed, set);
            perm[(round.0 as usize - 1) % set.n()]
        }
    }
}

/// The height's full permutation schedule under `Permutation` mode.
pub fn leader_permutation(seed: &HashDigest, set: &ParticipantSet) -> Vec<NodeId> {
    let mut perm = set.members.clone();
    let mut rng = ChaCha20Rng::from_seed(*seed.as_bytes());
    perm.shuffle(&mut rng);
    perm
}

/// Aggregate proof inside a certificate. Threshold signatures are the main
/// path; all-signer multi-signatures come from the speculative tree run; raw
/// share lists are the DKG-failure fallback and cost O(n) on the wire.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum CertProof {
    Threshold(ThresholdSignature),
    Multi(MultiSignature),
    Shares(Vec<Signature>),
}

impl CertProof {
    pub fn is_linear_size(&self) -> bool {
        matches!(self, CertProof::Shares(_))
    }

    /// Verify the aggregate over `digest`. Multi proofs must carry the full
    /// member bitmap; share lists need a quorum of distinct valid members.
    fn verify(&self, digest: &HashDigest, keys: &ThresholdKeySet, quorum: usize) -> bool {
        match self {
            CertProof::Threshold(ts) => keys.verify_threshold(ts, digest),
            CertProof::Multi(ms) => keys.verify_multi(ms, digest) && ms.signers.len() == keys.n,
            CertProof::Shares(shares) => {
                let mut signers = BTreeSet::new();
                for s in shares {
                    if s.digest != *digest || !keys.verify(s) {
                        return false;
                    }
                    signers.insert(s.signer);
                }
                signers.len() >= quorum
            }
        }
    }
}

/// Commit certificate: the `(round, block hash, aggregate)` triple a replica
/// locks on. Constant serialized size on the threshold path.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CommitCert {
    pub round: Round,
    pub block_hash: HashDigest,
    pub proof: CertProof,
}

impl CommitCert {
    /// Digest the Prepare shares sign: binds height, round, and block hash.
    pub fn prepare_digest(height: u64, round: Round, block_hash: &HashDigest) -> HashDigest {
        let mut enc = Encoder::new().tag("prp");
        enc.put_u64(height);
        enc.put_u32(round.0);
        enc.put_digest(block_hash);
        crypto::hash_bytes(&enc.finish())
    }

    /// Digest of what the certificate certifies, independent of how it is
    /// proved. Threshold, all-signers, and share-list proofs of the same
    /// `(round, block hash)` are interchangeable evidence of the same fact.
    pub fn content_digest(&self, height: u64) -> HashDigest {
        let mut enc = Encoder::new().tag("ccc");
        enc.put_u64(height);
        enc.put_u32(self.round.0);
        enc.put_digest(&self.block_hash);
        crypto::hash_bytes(&enc.finish())
    }

    /// Digest the Commit shares sign: height and block hash only. Commit
    /// votes are cast only in the voter's current round, which is what keeps
    /// cross-round share mixing harmless; leaving the round out of the signed
    /// digest makes every finalizing aggregate for a block — whichever round
    /// or proof path produced it — interchangeable, so the leader seed
    /// derived from it is unique per height and honest replicas can never
    /// diverge on the next schedule.
    pub fn commit_digest(&self, height: u64) -> HashDigest {
        let mut enc = Encoder::new().tag("cmt");
        enc.put_u64(height);
        enc.put_digest(&self.block_hash);
        crypto::hash_bytes(&enc.finish())
    }

    pub fn verify(&self, height: u64, keys: &ThresholdKeySet, quorum: usize) -> bool {
        let digest = Self::prepare_digest(height, self.round, &self.block_hash);
        self.proof.verify(&digest, keys, quorum)
    }
}

/// Proof that a quorum committed to a certificate; receiving one finalizes the
/// block. The VRF seed for the next height derives from this.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FinalizeCert {
    pub cc: CommitCert,
    pub proof: CertProof,
}

impl FinalizeCert {
    pub fn verify(&self, height: u64, keys: &ThresholdKeySet, quorum: usize) -> bool {
        self.cc.verify(height, keys, quorum)
            && self
                .proof
                .verify(&self.cc.commit_digest(height), keys, quorum)
    }

    /// Next-height leader seed: the VRF applied to the finalizing aggregate's
    /// signed material. The commit digest depends only on height and block
    /// hash, so duplicate certificates (different rounds, different proof
    /// paths) all yield the same seed: the schedule is a function of the
    /// finalized block alone and honest replicas always agree on it.
    pub fn seed(&self, height: u64) -> HashDigest {
        crypto::vrf_from_seed(&self.cc.commit_digest(height), height)
    }
}

/// Which aggregation a tree message or fallback broadcast belongs to.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum AggPhase {
    Prepare,
    Commit,
}

/// Wire messages. Every variant is attributable to its sender: votes and
/// NewViews carry signature shares, proposals carry the proposer's signed
/// header, and certificate broadcasts are self-certifying.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum ProtocolMessage {
    /// Leader proposal. After a view change it carries the highest commit
    /// certificate gathered from NewViews.
    Preprepare {
        height: u64,
        round: Round,
        block: Block,
        highest_cc: Option<CommitCert>,
        attestation: ProposalAttestation,
    },
    /// Prepare share sent to the round's collector. Piggybacks the first
    /// proposal header the voter saw, for equivocation detection.
    PrepareVote {
        height: u64,
        round: Round,
        block_hash: HashDigest,
        share: Signature,
        seen: Option<ProposalAttestation>,
    },
    /// Collector's certificate broadcast (threshold or speculative proof).
    CCBroadcast { height: u64, cc: CommitCert },
    /// Commit share sent to the collector.
    CommitVote {
        height: u64,
        round: Round,
        cc_digest: HashDigest,
        share: Signature,
    },
    /// Collector's finalization broadcast. Carries the block body so a replica
    /// that missed the proposal can still finalize.
    FinalizeBroadcast {
        height: u64,
        cert: FinalizeCert,
        block: Block,
    },
    /// View-change message to the next leader, carrying the sender's lock (and
    /// its block body, so the new leader can re-propose it).
    NewView {
        height: u64,
        new_round: Round,
        locked_cc: Option<CommitCert>,
        locked_block: Option<Block>,
        share: Signature,
        seen: Option<ProposalAttestation>,
    },
    /// DKG-failure fallback: the collector broadcasts the raw quorum of
    /// signatures without aggregating them. O(n) size.
    FallbackBroadcast {
        height: u64,
        round: Round,
        phase: AggPhase,
        block_hash: HashDigest,
        shares: Vec<Signature>,
        /// Block body, attached on the Commit phase so receivers can finalize.
        block: Option<Block>,
    },
    /// Speculative tree pass, parent to child: the block (Prepare pass) or the
    /// certificate to commit to (Commit pass).
    CosiDown {
        height: u64,
        pass: AggPhase,
        block: Option<Block>,
        cc: Option<CommitCert>,
        attestation: Option<ProposalAttestation>,
    },
    /// Speculative tree pass, child to parent: the subtree aggregate.
    CosiUp {
        height: u64,
        pass: AggPhase,
        agg: MultiSignature,
    },
    /// A tree node's children failed to contribute: tell the leader to fall
    /// back to the collector path.
    CosiFault { height: u64, reporter: NodeId },
}

impl ProtocolMessage {
    pub fn height(&self) -> u64 {
        match self {
            ProtocolMessage::Preprepare { height, .. }
            | ProtocolMessage::PrepareVote { height, .. }
            | ProtocolMessage::CCBroadcast { height, .. }
            | ProtocolMessage::CommitVote { height, .. }
            | ProtocolMessage::FinalizeBroadcast { height, .. }
            | ProtocolMessage::NewView { height, .. }
            | ProtocolMessage::FallbackBroadcast { height, .. }
            | ProtocolMessage::CosiDown { height, .. }
            | ProtocolMessage::CosiUp { height, .. }
            | ProtocolMessage::CosiFault { height, .. } => *height,
        }
    }

    /// Round the message belongs to, where one applies.
    pub fn round(&self) -> Option<Round> {
        match self {
            ProtocolMessage::Preprepare { round, .. }
            | ProtocolMessage::PrepareVote { round, .. }
            | ProtocolMessage::CommitVote { round, .. }
            | ProtocolMessage::FallbackBroadcast { round, .. } => Some(*round),
            ProtocolMessage::CCBroadcast { cc, .. } => Some(cc.round),
            ProtocolMessage::NewView { new_round, .. } => Some(*new_round),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::Preprepare { .. } => "preprepare",
            ProtocolMessage::PrepareVote { .. } => "prepare_vote",
            ProtocolMessage::CCBroadcast { .. } => "cc_broadcast",
            ProtocolMessage::CommitVote { .. } => "commit_vote",
            ProtocolMessage::FinalizeBroadcast { .. } => "finalize_broadcast",
            ProtocolMessage::NewView { .. } => "new_view",
            ProtocolMessage::FallbackBroadcast { .. } => "fallback_broadcast",
            // The prepare-pass down leg distributes the block body; it is
            // accounted as body traffic, not protocol volume.
            ProtocolMessage::CosiDown {
                pass: AggPhase::Prepare,
                ..
            } => "cosi_down_block",
            ProtocolMessage::CosiDown { .. } => "cosi_down_cert",
            ProtocolMessage::CosiUp { .. } => "cosi_up",
            ProtocolMessage::CosiFault { .. } => "cosi_fault",
        }
    }

    /// Linear-size messages cost n units in the accounting; everything else
    /// is constant-size. Blocks hold a bounded, configured number of
    /// transactions, so messages carrying a body stay constant-size.
    pub fn is_linear_size(&self) -> bool {
        match self {
            ProtocolMessage::FallbackBroadcast { .. } => true,
            ProtocolMessage::CCBroadcast { cc, .. } => cc.proof.is_linear_size(),
            ProtocolMessage::FinalizeBroadcast { cert, .. } => {
                cert.proof.is_linear_size() || cert.cc.proof.is_linear_size()
            }
            ProtocolMessage::NewView { locked_cc, .. } => {
                locked_cc.as_ref().is_some_and(|c| c.proof.is_linear_size())
            }
            ProtocolMessage::Preprepare { highest_cc, .. } => {
                highest_cc.as_ref().is_some_and(|c| c.proof.is_linear_size())
            }
            _ => false,
        }
    }
}

/// Where an outbound message goes. Broadcast excludes the sender.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Target {
    Node(NodeId),
    Broadcast,
}

#[derive(Clone, Debug)]
pub struct Outbound {
    pub to: Target,
    pub msg: ProtocolMessage,
}

/// How the replica classified a processed message. Stale, duplicate, and
/// invalid messages are excluded from completion-cost accounting.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Disposition {
    Counted,
    Stale,
    Duplicate,
    Invalid,
    Buffered,
}

/// Outcome of the speculative run at a height, reported by the tree root.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum SpeculativeOutcome {
    Success {
        prepare_elapsed: u64,
        commit_elapsed: u64,
    },
    Fallback {
        reporter: NodeId,
    },
}

/// Consensus phase at the current height, for observability.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Idle,
    PrepareSent,
    Locked,
    Finalized,
}

/// Static per-replica configuration.
#[derive(Clone, Debug)]
pub struct ReplicaConfig {
    /// Initial round timeout: one delivery bound per protocol step (five
    /// steps leader-to-finalize) plus the height-entry skew, with slack.
    /// Doubles on every view change within a height.
    pub t0: u64,
    /// Message delay bound, used to size speculative-pass deadlines.
    pub delta: u64,
    pub max_txs_per_block: usize,
    pub genesis_seed: HashDigest,
    pub leader_mode: LeaderMode,
    pub speculative: bool,
    pub fanout: usize,
    /// Bounded buffer for future-round/future-height messages; overflow drops
    /// the oldest entry.
    pub pending_cap: usize,
    /// Transactions scheduled for inclusion, by height. Identical at every
    /// replica; whichever leader proposes fresh at a height includes them.
    pub tx_schedule: BTreeMap<u64, Vec<Transaction>>,
}

impl ReplicaConfig {
    pub fn new(delta: u64, genesis_seed: HashDigest, leader_mode: LeaderMode) -> Self {
        ReplicaConfig {
            t0: 8 * delta,
            delta,
            max_txs_per_block: 64,
            genesis_seed,
            leader_mode,
            speculative: false,
            fanout: 2,
            pending_cap: 4096,
            tx_schedule: BTreeMap::new(),
        }
    }
}

/// Timer channels a replica can request.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum TimerKind {
    Round { height: u64, round: Round },
    Cosi { height: u64, pass: AggPhase },
    /// Delayed start of the speculative run: the root waits out the
    /// height-entry skew so every node has entered the height before the
    /// first tree pass begins.
    CosiStart { height: u64 },
}

/// Lock (and its block body, when known) carried by one NewView sender.
type CarriedLock = (Option<CommitCert>, Option<Block>);

/// A block finalized at some height, with the certificate that finalized it.
#[derive(Clone, Debug)]
pub struct ChainEntry {
    pub block: Block,
    pub hash: HashDigest,
    pub cert: FinalizeCert,
}

struct CosiPassState {
    payload_digest: HashDigest,
    own_share: MultiSignature,
    child_aggs: BTreeMap<NodeId, MultiSignature>,
    started_at: u64,
}

/// One node's consensus machine.
pub struct Replica {
    pub id: NodeId,
    pub cfg: ReplicaConfig,
    pub set: ParticipantSet,
    pub keys: ThresholdKeySet,

    pub chain: Vec<ChainEntry>,
    pub height: u64,
    pub round: Round,
    pub phase: Phase,
    pub locked: Option<CommitCert>,
    seed: HashDigest,
    schedule: Vec<NodeId>,

    known_blocks: BTreeMap<HashDigest, Block>,
    invalid_hashes: BTreeSet<HashDigest>,
    first_proposal: BTreeMap<Round, ProposalAttestation>,
    voted_prepare: BTreeSet<Round>,
    committed: BTreeSet<Round>,
    proposed: BTreeSet<Round>,

    prepare_buf: BTreeMap<(Round, HashDigest), BTreeMap<NodeId, Signature>>,
    cc_sent: BTreeSet<Round>,
    my_cc: BTreeMap<Round, (CommitCert, HashDigest)>,
    commit_buf: BTreeMap<Round, BTreeMap<NodeId, Signature>>,
    finalize_sent: BTreeSet<Round>,
    newview_buf: BTreeMap<Round, BTreeMap<NodeId, CarriedLock>>,

    pending: VecDeque<(NodeId, ProtocolMessage, u64)>,
    dispositions: Vec<(u64, Disposition)>,

    timer_gen: u64,
    timers: BTreeMap<u64, TimerKind>,
    timer_requests: Vec<(u64, u64)>,

    cosi_tree: Option<AggregationTree>,
    cosi_state: BTreeMap<AggPhase, CosiPassState>,
    cosi_failed: bool,
    pub spec_outcome: Option<SpeculativeOutcome>,

    banned: BTreeSet<NodeId>,
    evidence_out: Vec<SlashEvidence>,
    evidence_raised: BTreeSet<(u64, u32, NodeId, u8)>,
    catchup_sent: BTreeSet<(NodeId, u64, u32)>,

    /// Set when the replica advances to a new height; the simulator schedules
    /// a height-start kick and clears it.
    pub pending_height_start: bool,

    /// Speculative outcomes by height, kept for reporting.
    pub spec_history: BTreeMap<u64, SpeculativeOutcome>,
}

impl Replica {
    pub fn new(
        id: NodeId,
        cfg: ReplicaConfig,
        set: ParticipantSet,
        keys: ThresholdKeySet,
    ) -> Self {
        let seed = cfg.genesis_seed;
        let schedule = leader_permutation(&seed, &set);
        Replica {
            id,
            cfg,
            set,
            keys,
            chain: Vec::new(),
            height: 1,
            round: Round::FIRST,
            phase: Phase::Idle,
            locked: None,
            seed,
            schedule,
            known_blocks: BTreeMap::new(),
            invalid_hashes: BTreeSet::new(),
            first_proposal: BTreeMap::new(),
            voted_prepare: BTreeSet::new(),
            committed: BTreeSet::new(),
            proposed: BTreeSet::new(),
            prepare_buf: BTreeMap::new(),
            cc_sent: BTreeSet::new(),
            my_cc: BTreeMap::new(),
            commit_buf: BTreeMap::new(),
            finalize_sent: BTreeSet::new(),
            newview_buf: BTreeMap::new(),
            pending: VecDeque::new(),
            dispositions: Vec::new(),
            timer_gen: 0,
            timers: BTreeMap::new(),
            timer_requests: Vec::new(),
            cosi_tree: None,
            cosi_state: BTreeMap::new(),
            cosi_failed: false,
            spec_outcome: None,
            banned: BTreeSet::new(),
            evidence_out: Vec::new(),
            evidence_raised: BTreeSet::new(),
            catchup_sent: BTreeSet::new(),
            pending_height_start: true,
            spec_history: BTreeMap::new(),
        }
    }

    /// Bootstrap from a snapshot: adopt a finalized chain prefix and resume
    /// at the height after it. Used for nodes joining at an epoch boundary.
    pub fn adopt_chain(&mut self, chain: Vec<ChainEntry>) {
        self.height = chain.len() as u64 + 1;
        if let Some(last) = chain.last() {
            self.seed = last.cert.seed(self.height - 1);
        }
        self.chain = chain;
        self.schedule = leader_permutation(&self.seed, &self.set);
        self.pending_height_start = true;
    }

    /// Install a new epoch's membership and keys. The chain is retained; the
    /// same entry point bootstraps a joining node from a snapshot.
    pub fn install_epoch(&mut self, set: ParticipantSet, keys: ThresholdKeySet) {
        self.set = set;
        self.keys = keys;
        self.schedule = leader_permutation(&self.seed, &self.set);
    }

    pub fn tip_hash(&self) -> HashDigest {
        self.chain
            .last()
            .map(|e| e.hash)
            .unwrap_or(HashDigest::ZERO)
    }

    pub fn seed(&self) -> HashDigest {
        self.seed
    }

    pub fn finalize_cert(&self, height: u64) -> Option<&FinalizeCert> {
        self.chain.get(height as usize - 1).map(|e| &e.cert)
    }

    pub fn take_dispositions(&mut self) -> Vec<(u64, Disposition)> {
        std::mem::take(&mut self.dispositions)
    }

    pub fn take_evidence(&mut self) -> Vec<SlashEvidence> {
        std::mem::take(&mut self.evidence_out)
    }

    pub fn take_timer_requests(&mut self) -> Vec<(u64, u64)> {
        std::mem::take(&mut self.timer_requests)
    }

    pub fn leader_at(&self, round: Round) -> NodeId {
        match self.cfg.leader_mode {
            LeaderMode::Modular => leader_for(round, &self.seed, &self.set, LeaderMode::Modular),
            LeaderMode::Permutation => self.schedule[(round.0 as usize - 1) % self.set.n()],
        }
    }

    fn i_am_leader(&self, round: Round) -> bool {
        self.leader_at(round) == self.id
    }

    fn request_timer(&mut self, kind: TimerKind, at: u64) {
        self.timer_gen += 1;
        self.timers.insert(self.timer_gen, kind);
        self.timer_requests.push((self.timer_gen, at));
    }

    fn round_timeout(&self, round: Round) -> u64 {
        let exp = (round.0 - 1).min(20);
        let base = self.cfg.t0 << exp;
        if round == Round::FIRST && self.cfg.speculative {
            // Budget for the two tree passes plus the fallback re-broadcast.
            let depth = self
                .cosi_tree
                .as_ref()
                .map(|t| t.depth as u64)
                .unwrap_or_else(|| crypto::ceil_log2(self.set.n()) as u64);
            base + 4 * depth * self.cfg.delta + self.entry_skew()
        } else {
            base
        }
    }

    fn arm_round_timer(&mut self, now: u64) {
        let deadline = now + self.round_timeout(self.round);
        self.request_timer(
            TimerKind::Round {
                height: self.height,
                round: self.round,
            },
            deadline,
        );
    }

    /// Enter the current height: build the leader schedule, arm the round
    /// timer, and propose (or start the tree run) if we lead round 1.
    pub fn start_height(&mut self, now: u64) -> Vec<Outbound> {
        self.pending_height_start = false;
        let mut out = Vec::new();
        if self.cfg.speculative {
            self.cosi_tree = Some(AggregationTree::build(
                &self.set,
                self.cfg.fanout,
                &self.seed,
                self.leader_at(Round::FIRST),
            ));
        }
        self.arm_round_timer(now);
        if self.i_am_leader(Round::FIRST) {
            if self.cfg.speculative {
                // Peers finalize the previous height within one delivery
                // bound of each other and enter this height one kick later;
                // distributing before they arrive would stall the tree.
                self.request_timer(
                    TimerKind::CosiStart {
                        height: self.height,
                    },
                    now + self.entry_skew(),
                );
            } else {
                let msgs = self.propose(Round::FIRST, None, now);
                out.extend(msgs);
            }
        }
        self.drain_pending(&mut out, now);
        out
    }

    /// Worst-case spread between the first and last replica entering a
    /// height: the finalize broadcast wave plus the start kick.
    fn entry_skew(&self) -> u64 {
        self.cfg.delta + 2
    }

    fn scheduled_txs(&self) -> Vec<Transaction> {
        let mut txs = self
            .cfg
            .tx_schedule
            .get(&self.height)
            .cloned()
            .unwrap_or_default();
        txs.truncate(self.cfg.max_txs_per_block);
        txs
    }

    fn build_fresh_block(&self, round: Round) -> Block {
        Block {
            height: self.height,
            parent_hash: self.tip_hash(),
            proposer: self.id,
            round: round.0,
            txs: self.scheduled_txs(),
        }
    }

    fn attest(&self, round: Round, block_hash: &HashDigest) -> ProposalAttestation {
        let digest = ProposalAttestation::signing_digest(self.height, round.0, block_hash);
        ProposalAttestation {
            height: self.height,
            round: round.0,
            signer: self.id,
            block_hash: *block_hash,
            sig: self.keys.sign(self.id, digest).expect("member key"),
        }
    }

    /// Propose a block for `round`. Re-proposes the carried certificate's
    /// block when one is given; otherwise builds a fresh one.
    fn propose(
        &mut self,
        round: Round,
        carried: Option<(CommitCert, Block)>,
        now: u64,
    ) -> Vec<Outbound> {
        if !self.i_am_leader(round) || self.proposed.contains(&round) {
            return Vec::new();
        }
        self.proposed.insert(round);
        let (block, highest_cc) = match carried {
            Some((cc, block)) => (block, Some(cc)),
            None => (self.build_fresh_block(round), None),
        };
        let block_hash = hash_block(&block);
        let attestation = self.attest(round, &block_hash);
        self.known_blocks.insert(block_hash, block.clone());
        self.first_proposal
            .entry(round)
            .or_insert_with(|| attestation.clone());

        let mut out = vec![Outbound {
            to: Target::Broadcast,
            msg: ProtocolMessage::Preprepare {
                height: self.height,
                round,
                block,
                highest_cc,
                attestation,
            },
        }];
        // The collector's own Prepare share is counted locally.
        let own = self.own_prepare_share(round, &block_hash);
        self.record_prepare_share(round, block_hash, own);
        self.voted_prepare.insert(round);
        self.try_aggregate_prepare(round, block_hash, &mut out, now);
        out
    }

    fn own_prepare_share(&self, round: Round, block_hash: &HashDigest) -> Signature {
        let digest = CommitCert::prepare_digest(self.height, round, block_hash);
        self.keys.sign(self.id, digest).expect("member key")
    }

    fn record_prepare_share(&mut self, round: Round, block_hash: HashDigest, share: Signature) {
        self.prepare_buf
            .entry((round, block_hash))
            .or_default()
            .insert(share.signer, share);
    }

    fn set_spec_outcome(&mut self, outcome: SpeculativeOutcome) {
        self.spec_history.insert(self.height, outcome.clone());
        self.spec_outcome = Some(outcome);
    }

    fn raise_evidence(&mut self, ev: SlashEvidence) {
        let round = match &ev {
            SlashEvidence::Equivocation { first, .. } => first.round,
            SlashEvidence::NonLeaderProposal { proposal, .. } => proposal.round,
            SlashEvidence::InvalidBlock { attestation, .. } => attestation.round,
        };
        let code = match &ev {
            SlashEvidence::Equivocation { .. } => 0u8,
            SlashEvidence::NonLeaderProposal { .. } => 1,
            SlashEvidence::InvalidBlock { .. } => 2,
        };
        let key = (ev.height(), round, ev.offender(), code);
        if self.evidence_raised.insert(key) {
            self.banned.insert(ev.offender());
            self.evidence_out.push(ev);
        }
    }

    /// Compare a proposal header against the first one seen for its round;
    /// two different hashes signed by the same leader are equivocation.
    fn check_equivocation(&mut self, att: &ProposalAttestation) {
        if att.height != self.height || !att.verify(&self.keys) {
            return;
        }
        let round = Round(att.round);
        match self.first_proposal.get(&round) {
            None => {
                self.first_proposal.insert(round, att.clone());
            }
            Some(first) if first.signer == att.signer && first.block_hash != att.block_hash => {
                let ev = SlashEvidence::Equivocation {
                    first: first.clone(),
                    second: att.clone(),
                };
                self.raise_evidence(ev);
            }
            _ => {}
        }
    }

    fn reseed(&mut self, seed: HashDigest) {
        if seed != self.seed {
            self.seed = seed;
            self.schedule = leader_permutation(&self.seed, &self.set);
        }
    }

    /// Main dispatch. `token` identifies the transmission record; the
    /// disposition for it is emitted through `take_dispositions`.
    pub fn on_message(
        &mut self,
        from: NodeId,
        msg: ProtocolMessage,
        now: u64,
        token: u64,
    ) -> Vec<Outbound> {
        let mut out = Vec::new();
        let disposition = self.dispatch(from, msg, now, token, &mut out);
        self.dispositions.push((token, disposition));
        out
    }

    fn dispatch(
        &mut self,
        from: NodeId,
        msg: ProtocolMessage,
        now: u64,
        token: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        let height = msg.height();
        if height < self.height {
            // A stale NewView is a timeout signal from a peer genuinely stuck
            // at an old height: reply with the stored finalize certificate
            // and body. Anything else stale is ordinary pipeline lateness and
            // is simply dropped.
            if matches!(msg, ProtocolMessage::NewView { .. }) {
                let round_key = msg.round().map(|r| r.0).unwrap_or(0);
                if let Some(entry) = self.chain.get(height as usize - 1) {
                    if self.catchup_sent.insert((from, height, round_key)) {
                        out.push(Outbound {
                            to: Target::Node(from),
                            msg: ProtocolMessage::FinalizeBroadcast {
                                height,
                                cert: entry.cert.clone(),
                                block: entry.block.clone(),
                            },
                        });
                    }
                }
            }
            return Disposition::Stale;
        }
        if height > self.height {
            self.buffer(from, msg, token);
            return Disposition::Buffered;
        }
        match msg {
            ProtocolMessage::Preprepare {
                round,
                block,
                highest_cc,
                attestation,
                ..
            } => self.on_preprepare(from, round, block, highest_cc, attestation, now, token, out),
            ProtocolMessage::PrepareVote {
                round,
                block_hash,
                share,
                seen,
                ..
            } => self.on_prepare_vote(from, round, block_hash, share, seen, now, out),
            ProtocolMessage::CCBroadcast { cc, .. } => self.on_cc(from, cc, now, token, out),
            ProtocolMessage::CommitVote {
                round,
                cc_digest,
                share,
                ..
            } => self.on_commit_vote(from, round, cc_digest, share, now, out),
            ProtocolMessage::FinalizeBroadcast { cert, block, .. } => {
                self.on_finalize(cert, block, now, out)
            }
            ProtocolMessage::NewView {
                new_round,
                locked_cc,
                locked_block,
                share,
                seen,
                ..
            } => self.on_new_view(from, new_round, locked_cc, locked_block, share, seen, now, out),
            ProtocolMessage::FallbackBroadcast {
                round,
                phase,
                block_hash,
                shares,
                block,
                ..
            } => self.on_fallback(from, round, phase, block_hash, shares, block, now, token, out),
            ProtocolMessage::CosiDown {
                pass,
                block,
                cc,
                attestation,
                ..
            } => self.on_cosi_down(from, pass, block, cc, attestation, now, out),
            ProtocolMessage::CosiUp { pass, agg, .. } => self.on_cosi_up(from, pass, agg, now, out),
            ProtocolMessage::CosiFault { reporter, .. } => self.on_cosi_fault(reporter, now, out),
        }
    }

    fn buffer(&mut self, from: NodeId, msg: ProtocolMessage, token: u64) {
        if self.pending.len() >= self.cfg.pending_cap {
            if let Some((_, _, dropped)) = self.pending.pop_front() {
                self.dispositions.push((dropped, Disposition::Stale));
            }
        }
        self.pending.push_back((from, msg, token));
    }

    /// Re-dispatch buffered messages that have become current. Loops until no
    /// further progress, since handling one message can advance the round or
    /// height and unlock more.
    fn drain_pending(&mut self, out: &mut Vec<Outbound>, now: u64) {
        loop {
            let mut progressed = false;
            let mut keep = VecDeque::new();
            while let Some((from, msg, token)) = self.pending.pop_front() {
                let h = msg.height();
                let future_round = msg
                    .round()
                    .is_some_and(|r| r > self.round && h == self.height);
                if h > self.height || future_round {
                    keep.push_back((from, msg, token));
                } else {
                    progressed = true;
                    let d = self.dispatch(from, msg, now, token, out);
                    self.dispositions.push((token, d));
                }
            }
            self.pending = keep;
            if !progressed {
                break;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_preprepare(
        &mut self,
        from: NodeId,
        round: Round,
        block: Block,
        highest_cc: Option<CommitCert>,
        attestation: ProposalAttestation,
        _now: u64,
        token: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        if round > self.round {
            self.buffer(
                from,
                ProtocolMessage::Preprepare {
                    height: self.height,
                    round,
                    block,
                    highest_cc,
                    attestation,
                },
                token,
            );
            return Disposition::Buffered;
        }
        if round < self.round {
            return Disposition::Stale;
        }
        // Attribution: the header must be signed by the sender for this exact
        // proposal.
        let block_hash = hash_block(&block);
        if attestation.signer != from
            || attestation.height != self.height
            || attestation.round != round.0
            || attestation.block_hash != block_hash
            || !attestation.verify(&self.keys)
        {
            return Disposition::Invalid;
        }
        if block.height != self.height
            || block.parent_hash != self.tip_hash()
            || block.txs.len() > self.cfg.max_txs_per_block
        {
            return Disposition::Invalid;
        }

        // Leadership: the seed is a function of the finalized parent block,
        // so every replica that finalized the parent derives the same
        // schedule.
        if self.leader_at(round) != from {
            self.raise_evidence(SlashEvidence::NonLeaderProposal {
                proposal: attestation,
                expected_leader: self.leader_at(round),
            });
            return Disposition::Invalid;
        }

        // Equivocation detection against the first header seen this round.
        let duplicate = self
            .first_proposal
            .get(&round)
            .is_some_and(|f| f.signer == from && f.block_hash == block_hash);
        self.check_equivocation(&attestation);
        if duplicate {
            return Disposition::Duplicate;
        }

        // Carried certificate: must be valid and must certify this block.
        if let Some(cc) = &highest_cc {
            if cc.block_hash != block_hash
                || !cc.verify(self.height, &self.keys, self.set.quorum())
            {
                return Disposition::Invalid;
            }
            // Unlock rule: a certificate with a higher round than our lock
            // releases (and replaces) it.
            let lock_round = self.locked.as_ref().map(|l| l.round);
            if lock_round.is_none() || cc.round > lock_round.unwrap() {
                self.set_lock(cc.clone());
            }
        } else if block.round != round.0 || block.proposer != from {
            // Fresh proposals are authored by this round's leader.
            return Disposition::Invalid;
        }

        self.known_blocks.insert(block_hash, block);

        // Lock rule: vote when unlocked, locked on the same digest, or just
        // unlocked by the carried certificate.
        let may_vote = match &self.locked {
            None => true,
            Some(lock) => lock.block_hash == block_hash,
        };
        if may_vote && !self.voted_prepare.contains(&round) {
            self.voted_prepare.insert(round);
            self.phase = Phase::PrepareSent;
            let share = self.own_prepare_share(round, &block_hash);
            let seen = self.first_proposal.get(&round).cloned();
            out.push(Outbound {
                to: Target::Node(from),
                msg: ProtocolMessage::PrepareVote {
                    height: self.height,
                    round,
                    block_hash,
                    share,
                    seen,
                },
            });
        }
        Disposition::Counted
    }

    #[allow(clippy::too_many_arguments)]
    fn on_prepare_vote(
        &mut self,
        from: NodeId,
        round: Round,
        block_hash: HashDigest,
        share: Signature,
        seen: Option<ProposalAttestation>,
        now: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        if let Some(att) = &seen {
            self.check_equivocation(att);
        }
        if !self.i_am_leader(round) {
            return Disposition::Invalid;
        }
        if round < self.round {
            return Disposition::Stale;
        }
        // Votes aggregate only toward the block we actually proposed.
        let expected = self.first_proposal.get(&round).map(|a| a.block_hash);
        if expected != Some(block_hash) {
            return Disposition::Invalid;
        }
        let digest = CommitCert::prepare_digest(self.height, round, &block_hash);
        if share.signer != from
            || share.digest != digest
            || !self.keys.verify(&share)
            || self.banned.contains(&from)
        {
            return Disposition::Invalid;
        }
        let buf = self.prepare_buf.entry((round, block_hash)).or_default();
        if buf.contains_key(&from) {
            return Disposition::Duplicate;
        }
        buf.insert(from, share);
        self.try_aggregate_prepare(round, block_hash, out, now);
        Disposition::Counted
    }

    /// At 2f+1 distinct shares the collector combines and broadcasts the
    /// certificate — or, when the epoch's DKG failed, the raw quorum of
    /// shares.
    fn try_aggregate_prepare(
        &mut self,
        round: Round,
        block_hash: HashDigest,
        out: &mut Vec<Outbound>,
        now: u64,
    ) {
        let quorum = self.set.quorum();
        let Some(buf) = self.prepare_buf.get(&(round, block_hash)) else {
            return;
        };
        if buf.len() < quorum || self.cc_sent.contains(&round) {
            return;
        }
        self.cc_sent.insert(round);
        let shares: Vec<Signature> = buf.values().take(quorum).cloned().collect();
        let cc = match self.keys.combine_threshold(&shares) {
            Ok(ts) => {
                let cc = CommitCert {
                    round,
                    block_hash,
                    proof: CertProof::Threshold(ts),
                };
                out.push(Outbound {
                    to: Target::Broadcast,
                    msg: ProtocolMessage::CCBroadcast {
                        height: self.height,
                        cc: cc.clone(),
                    },
                });
                cc
            }
            Err(crypto::CryptoError::DkgFailed) => {
                out.push(Outbound {
                    to: Target::Broadcast,
                    msg: ProtocolMessage::FallbackBroadcast {
                        height: self.height,
                        round,
                        phase: AggPhase::Prepare,
                        block_hash,
                        shares: shares.clone(),
                        block: None,
                    },
                });
                CommitCert {
                    round,
                    block_hash,
                    proof: CertProof::Shares(shares),
                }
            }
            Err(_) => return,
        };
        self.accept_cc(cc, now, out);
    }

    /// Lock on a verified certificate and, if it belongs to the current
    /// round, commit-vote to the collector.
    fn accept_cc(&mut self, cc: CommitCert, now: u64, out: &mut Vec<Outbound>) {
        if self.invalid_hashes.contains(&cc.block_hash) {
            return;
        }
        let lock_round = self.locked.as_ref().map(|l| l.round);
        if lock_round.is_none() || cc.round >= lock_round.unwrap() {
            self.set_lock(cc.clone());
        }
        if cc.round == self.round && !self.committed.contains(&cc.round) {
            self.committed.insert(cc.round);
            let commit_digest = cc.commit_digest(self.height);
            let share = self.keys.sign(self.id, commit_digest).expect("member key");
            let collector = self.leader_at(cc.round);
            if collector == self.id {
                self.record_commit_share(cc.round, cc, share, now, out);
            } else {
                out.push(Outbound {
                    to: Target::Node(collector),
                    msg: ProtocolMessage::CommitVote {
                        height: self.height,
                        round: cc.round,
                        cc_digest: commit_digest,
                        share,
                    },
                });
            }
        }
    }

    fn set_lock(&mut self, cc: CommitCert) {
        if let Some(old) = &self.locked {
            debug_assert!(cc.round >= old.round, "lock round must not decrease");
        }
        self.locked = Some(cc);
        self.phase = Phase::Locked;
    }

    fn on_cc(
        &mut self,
        from: NodeId,
        cc: CommitCert,
        now: u64,
        token: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        if !cc.verify(self.height, &self.keys, self.set.quorum()) {
            return Disposition::Invalid;
        }
        if cc.round > self.round {
            self.buffer(
                from,
                ProtocolMessage::CCBroadcast {
                    height: self.height,
                    cc,
                },
                token,
            );
            return Disposition::Buffered;
        }
        self.accept_cc(cc, now, out);
        Disposition::Counted
    }

    fn record_commit_share(
        &mut self,
        round: Round,
        cc: CommitCert,
        share: Signature,
        now: u64,
        out: &mut Vec<Outbound>,
    ) {
        let commit_digest = cc.commit_digest(self.height);
        self.my_cc.entry(round).or_insert((cc, commit_digest));
        self.commit_buf
            .entry(round)
            .or_default()
            .insert(share.signer, share);
        self.try_aggregate_commit(round, now, out);
    }

    fn on_commit_vote(
        &mut self,
        from: NodeId,
        round: Round,
        cc_digest: HashDigest,
        share: Signature,
        now: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        if !self.i_am_leader(round) {
            return Disposition::Invalid;
        }
        let Some((_, expected_digest)) = self.my_cc.get(&round) else {
            return Disposition::Invalid;
        };
        if cc_digest != *expected_digest {
            return Disposition::Invalid;
        }
        if share.signer != from
            || share.digest != cc_digest
            || !self.keys.verify(&share)
            || self.banned.contains(&from)
        {
            return Disposition::Invalid;
        }
        let buf = self.commit_buf.entry(round).or_default();
        if buf.contains_key(&from) {
            return Disposition::Duplicate;
        }
        buf.insert(from, share);
        self.try_aggregate_commit(round, now, out);
        Disposition::Counted
    }

    fn try_aggregate_commit(&mut self, round: Round, now: u64, out: &mut Vec<Outbound>) {
        let quorum = self.set.quorum();
        let Some((cc, _)) = self.my_cc.get(&round).cloned() else {
            return;
        };
        let Some(buf) = self.commit_buf.get(&round) else {
            return;
        };
        if buf.len() < quorum || self.finalize_sent.contains(&round) {
            return;
        }
        self.finalize_sent.insert(round);
        let shares: Vec<Signature> = buf.values().take(quorum).cloned().collect();
        let proof = match self.keys.combine_threshold(&shares) {
            Ok(ts) => CertProof::Threshold(ts),
            Err(crypto::CryptoError::DkgFailed) => CertProof::Shares(shares.clone()),
            Err(_) => return,
        };
        let cert = FinalizeCert {
            cc: cc.clone(),
            proof,
        };
        let block = self
            .known_blocks
            .get(&cc.block_hash)
            .cloned()
            .expect("collector holds the proposed block");
        match &cert.proof {
            CertProof::Shares(raw) => out.push(Outbound {
                to: Target::Broadcast,
                msg: ProtocolMessage::FallbackBroadcast {
                    height: self.height,
                    round,
                    phase: AggPhase::Commit,
                    block_hash: cc.block_hash,
                    shares: raw.clone(),
                    block: Some(block.clone()),
                },
            }),
            _ => out.push(Outbound {
                to: Target::Broadcast,
                msg: ProtocolMessage::FinalizeBroadcast {
                    height: self.height,
                    cert: cert.clone(),
                    block: block.clone(),
                },
            }),
        }
        self.finalize(cert, block, now, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn on_fallback(
        &mut self,
        from: NodeId,
        round: Round,
        phase: AggPhase,
        block_hash: HashDigest,
        shares: Vec<Signature>,
        block: Option<Block>,
        now: u64,
        token: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        if shares.len() != self.set.quorum() {
            return Disposition::Invalid;
        }
        match phase {
            AggPhase::Prepare => {
                let cc = CommitCert {
                    round,
                    block_hash,
                    proof: CertProof::Shares(shares),
                };
                if !cc.verify(self.height, &self.keys, self.set.quorum()) {
                    return Disposition::Invalid;
                }
                if round > self.round {
                    self.buffer(
                        from,
                        ProtocolMessage::CCBroadcast {
                            height: self.height,
                            cc,
                        },
                        token,
                    );
                    return Disposition::Buffered;
                }
                self.accept_cc(cc, now, out);
                Disposition::Counted
            }
            AggPhase::Commit => {
                let Some(block) = block else {
                    return Disposition::Invalid;
                };
                // Rebuild a finalize certificate around our own lock on the
                // block; the commit digest is round-free, so any valid
                // certificate for this hash completes it.
                let Some(lock) = self.locked.clone().filter(|cc| cc.block_hash == block_hash)
                else {
                    return Disposition::Invalid;
                };
                let cert = FinalizeCert {
                    cc: lock,
                    proof: CertProof::Shares(shares),
                };
                self.on_finalize(cert, block, now, out)
            }
        }
    }

    fn on_finalize(
        &mut self,
        cert: FinalizeCert,
        block: Block,
        _now: u64,
        _out: &mut Vec<Outbound>,
    ) -> Disposition {
        if !cert.verify(self.height, &self.keys, self.set.quorum()) {
            return Disposition::Invalid;
        }
        if hash_block(&block) != cert.cc.block_hash
            || block.height != self.height
            || block.parent_hash != self.tip_hash()
        {
            return Disposition::Invalid;
        }
        // Transactions are verified here, before finalizing: a certified block
        // that fails verification is rejected and its proposer reported. The
        // hash is remembered as poisoned so no later round re-certifies it,
        // and the lock on it is released. Validity is objective, so every
        // honest replica makes the same judgment and none finalizes it.
        if let Some(idx) = block.first_invalid_tx(self.set.stake_per_member) {
            self.invalid_hashes.insert(cert.cc.block_hash);
            if self
                .locked
                .as_ref()
                .is_some_and(|l| l.block_hash == cert.cc.block_hash)
            {
                self.locked = None;
            }
            if let Some(att) = self
                .first_proposal
                .get(&Round(block.round))
                .filter(|a| a.block_hash == cert.cc.block_hash)
                .cloned()
            {
                self.raise_evidence(SlashEvidence::InvalidBlock {
                    block,
                    failing_tx: idx,
                    attestation: att,
                });
            }
            return Disposition::Invalid;
        }

        let hash = cert.cc.block_hash;
        let next_seed = cert.seed(self.height);
        self.chain.push(ChainEntry { block, hash, cert });

        // Advance to the next height with a clean slate.
        self.height += 1;
        self.round = Round::FIRST;
        self.phase = Phase::Idle;
        self.locked = None;
        self.known_blocks.clear();
        self.invalid_hashes.clear();
        self.first_proposal.clear();
        self.voted_prepare.clear();
        self.committed.clear();
        self.proposed.clear();
        self.prepare_buf.clear();
        self.cc_sent.clear();
        self.my_cc.clear();
        self.commit_buf.clear();
        self.finalize_sent.clear();
        self.newview_buf.clear();
        self.cosi_tree = None;
        self.cosi_state.clear();
        self.cosi_failed = false;
        self.spec_outcome = None;
        self.reseed(next_seed);
        self.pending_height_start = true;
        Disposition::Counted
    }

    /// Round timer fired: enter the next round and send a NewView to its
    /// leader, with our lock (and its block) attached.
    pub fn on_timer(&mut self, gen: u64, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        let Some(kind) = self.timers.remove(&gen) else {
            return out;
        };
        match kind {
            TimerKind::Round { height, round } => {
                if height != self.height || round != self.round {
                    return out;
                }
                let next = self.round.next();
                self.advance_round(next, now, &mut out);
            }
            TimerKind::CosiStart { height } => {
                if height == self.height
                    && self.round == Round::FIRST
                    && !self.cosi_failed
                    && !self.proposed.contains(&Round::FIRST)
                    && self.i_am_leader(Round::FIRST)
                {
                    let msgs = self.start_cosi(now);
                    out.extend(msgs);
                }
            }
            TimerKind::Cosi { height, pass } => {
                if height != self.height || self.cosi_failed {
                    return out;
                }
                if let Some(state) = self.cosi_state.get(&pass) {
                    let expected = self
                        .cosi_tree
                        .as_ref()
                        .map(|t| t.children(self.id).len())
                        .unwrap_or(0);
                    if state.child_aggs.len() < expected {
                        let msgs = self.report_cosi_fault(now);
                        out.extend(msgs);
                    }
                }
            }
        }
        out
    }

    fn advance_round(&mut self, new_round: Round, now: u64, out: &mut Vec<Outbound>) {
        debug_assert!(new_round > self.round);
        self.round = new_round;
        self.arm_round_timer(now);
        let leader = self.leader_at(new_round);
        let locked_cc = self.locked.clone();
        let locked_block = locked_cc
            .as_ref()
            .and_then(|cc| self.known_blocks.get(&cc.block_hash).cloned());
        if leader == self.id {
            // The leader counts its own NewView without a self-transmission.
            self.note_new_view(self.id, new_round, locked_cc, locked_block, now, out);
        } else {
            let digest = new_view_digest(self.height, new_round, locked_cc.as_ref());
            let share = self.keys.sign(self.id, digest).expect("member key");
            let seen = self.first_proposal.get(&new_round).cloned();
            out.push(Outbound {
                to: Target::Node(leader),
                msg: ProtocolMessage::NewView {
                    height: self.height,
                    new_round,
                    locked_cc,
                    locked_block,
                    share,
                    seen,
                },
            });
        }
        self.drain_pending(out, now);
    }

    #[allow(clippy::too_many_arguments)]
    fn on_new_view(
        &mut self,
        from: NodeId,
        new_round: Round,
        locked_cc: Option<CommitCert>,
        locked_block: Option<Block>,
        share: Signature,
        seen: Option<ProposalAttestation>,
        now: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        if let Some(att) = &seen {
            self.check_equivocation(att);
        }
        if !self.i_am_leader(new_round) {
            return Disposition::Invalid;
        }
        if new_round < self.round {
            return Disposition::Stale;
        }
        let digest = new_view_digest(self.height, new_round, locked_cc.as_ref());
        if share.signer != from || share.digest != digest || !self.keys.verify(&share) {
            return Disposition::Invalid;
        }
        if let Some(cc) = &locked_cc {
            if !cc.verify(self.height, &self.keys, self.set.quorum()) {
                return Disposition::Invalid;
            }
        }
        if self
            .newview_buf
            .get(&new_round)
            .is_some_and(|b| b.contains_key(&from))
        {
            return Disposition::Duplicate;
        }
        self.note_new_view(from, new_round, locked_cc, locked_block, now, out);
        Disposition::Counted
    }

    /// Accumulate a NewView; at 2f+1 the new leader re-proposes the highest
    /// carried certificate's block (or a fresh one) and enters the round.
    fn note_new_view(
        &mut self,
        from: NodeId,
        new_round: Round,
        locked_cc: Option<CommitCert>,
        locked_block: Option<Block>,
        now: u64,
        out: &mut Vec<Outbound>,
    ) {
        if let Some(cc) = &locked_cc {
            if let Some(b) = &locked_block {
                if hash_block(b) == cc.block_hash {
                    self.known_blocks.insert(cc.block_hash, b.clone());
                }
            }
        }
        let buf = self.newview_buf.entry(new_round).or_default();
        buf.insert(from, (locked_cc, locked_block));
        if buf.len() < self.set.quorum() || self.proposed.contains(&new_round) {
            return;
        }
        // Quorum of NewViews: catch up to the round if our timer lags.
        if new_round > self.round {
            self.round = new_round;
            self.arm_round_timer(now);
        }
        // Select the certificate with the highest round among those whose
        // block body is available; poisoned (invalid-tx) blocks are skipped.
        let carried = self
            .newview_buf
            .get(&new_round)
            .expect("just inserted")
            .values()
            .filter_map(|(cc, _)| cc.clone())
            .filter(|cc| {
                self.known_blocks.contains_key(&cc.block_hash)
                    && !self.invalid_hashes.contains(&cc.block_hash)
            })
            .max_by_key(|cc| cc.round);
        let carried = carried.map(|cc| {
            let block = self.known_blocks[&cc.block_hash].clone();
            (cc, block)
        });
        let msgs = self.propose(new_round, carried, now);
        out.extend(msgs);
        self.drain_pending(out, now);
    }

    // --- Speculative tree path -------------------------------------------

    /// Leader at round 1 with speculation on: distribute the block down the
    /// tree and start the Prepare aggregation pass.
    fn start_cosi(&mut self, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        let block = self.build_fresh_block(Round::FIRST);
        let block_hash = hash_block(&block);
        let attestation = self.attest(Round::FIRST, &block_hash);
        self.known_blocks.insert(block_hash, block.clone());
        self.first_proposal
            .entry(Round::FIRST)
            .or_insert_with(|| attestation.clone());
        self.proposed.insert(Round::FIRST);
        self.voted_prepare.insert(Round::FIRST);
        let digest = CommitCert::prepare_digest(self.height, Round::FIRST, &block_hash);
        self.begin_cosi_pass(AggPhase::Prepare, digest, now);
        let tree = self.cosi_tree.clone().expect("tree built at height start");
        for child in tree.children(self.id) {
            out.push(Outbound {
                to: Target::Node(child),
                msg: ProtocolMessage::CosiDown {
                    height: self.height,
                    pass: AggPhase::Prepare,
                    block: Some(block.clone()),
                    cc: None,
                    attestation: Some(attestation.clone()),
                },
            });
        }
        // Degenerate single-node tree: the pass completes immediately.
        self.try_complete_cosi(AggPhase::Prepare, now, &mut out);
        out
    }

    fn begin_cosi_pass(&mut self, pass: AggPhase, payload_digest: HashDigest, now: u64) {
        let share = self.keys.sign(self.id, payload_digest).expect("member key");
        let own = self
            .keys
            .combine_multi(std::slice::from_ref(&share))
            .expect("own share combines");
        self.cosi_state.insert(
            pass,
            CosiPassState {
                payload_digest,
                own_share: own,
                child_aggs: BTreeMap::new(),
                started_at: now,
            },
        );
        let tree = self.cosi_tree.as_ref().expect("tree exists");
        if !tree.children(self.id).is_empty() {
            // Children must report within a down leg plus an up leg across
            // the subtree below us.
            let budget = 2 * tree.subtree_height(self.id) as u64 * self.cfg.delta;
            self.request_timer(
                TimerKind::Cosi {
                    height: self.height,
                    pass,
                },
                now + budget,
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_cosi_down(
        &mut self,
        from: NodeId,
        pass: AggPhase,
        block: Option<Block>,
        cc: Option<CommitCert>,
        attestation: Option<ProposalAttestation>,
        now: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        if !self.cfg.speculative || self.round != Round::FIRST || self.cosi_failed {
            return Disposition::Stale;
        }
        let Some(tree) = self.cosi_tree.clone() else {
            return Disposition::Invalid;
        };
        if tree.parent(self.id) != Some(from) {
            return Disposition::Invalid;
        }
        let payload_digest = match pass {
            AggPhase::Prepare => {
                let Some(block_ref) = block.clone() else {
                    return Disposition::Invalid;
                };
                let block_hash = hash_block(&block_ref);
                let Some(att) = attestation.clone() else {
                    return Disposition::Invalid;
                };
                if att.signer != tree.root
                    || att.block_hash != block_hash
                    || att.height != self.height
                    || att.round != 1
                    || !att.verify(&self.keys)
                {
                    return Disposition::Invalid;
                }
                if block_ref.height != self.height
                    || block_ref.parent_hash != self.tip_hash()
                    || block_ref.txs.len() > self.cfg.max_txs_per_block
                {
                    return Disposition::Invalid;
                }
                self.check_equivocation(&att);
                self.known_blocks.insert(block_hash, block_ref);
                self.voted_prepare.insert(Round::FIRST);
                CommitCert::prepare_digest(self.height, Round::FIRST, &block_hash)
            }
            AggPhase::Commit => {
                let Some(cc_ref) = cc.clone() else {
                    return Disposition::Invalid;
                };
                if !cc_ref.verify(self.height, &self.keys, self.set.quorum()) {
                    return Disposition::Invalid;
                }
                // The all-signers certificate locks us just like a threshold
                // certificate would.
                let lock_round = self.locked.as_ref().map(|l| l.round);
                if lock_round.is_none() || cc_ref.round >= lock_round.unwrap() {
                    self.set_lock(cc_ref.clone());
                }
                self.committed.insert(Round::FIRST);
                cc_ref.commit_digest(self.height)
            }
        };
        if self.cosi_state.contains_key(&pass) {
            return Disposition::Duplicate;
        }
        self.begin_cosi_pass(pass, payload_digest, now);
        // Forward the payload down our subtree.
        for child in tree.children(self.id) {
            out.push(Outbound {
                to: Target::Node(child),
                msg: ProtocolMessage::CosiDown {
                    height: self.height,
                    pass,
                    block: block.clone(),
                    cc: cc.clone(),
                    attestation: attestation.clone(),
                },
            });
        }
        self.try_complete_cosi(pass, now, out);
        Disposition::Counted
    }

    fn on_cosi_up(
        &mut self,
        from: NodeId,
        pass: AggPhase,
        agg: MultiSignature,
        now: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        if !self.cfg.speculative || self.round != Round::FIRST || self.cosi_failed {
            return Disposition::Stale;
        }
        let Some(tree) = self.cosi_tree.clone() else {
            return Disposition::Invalid;
        };
        if !tree.children(self.id).contains(&from) {
            return Disposition::Invalid;
        }
        let Some(state) = self.cosi_state.get_mut(&pass) else {
            return Disposition::Invalid;
        };
        let expected: BTreeSet<NodeId> = tree.subtree_members(from).into_iter().collect();
        if agg.digest != state.payload_digest || agg.signers != expected {
            return Disposition::Invalid;
        }
        let payload_digest = state.payload_digest;
        if !self.keys.verify_multi(&agg, &payload_digest) {
            return Disposition::Invalid;
        }
        let state = self.cosi_state.get_mut(&pass).expect("checked above");
        if state.child_aggs.contains_key(&from) {
            return Disposition::Duplicate;
        }
        state.child_aggs.insert(from, agg);
        self.try_complete_cosi(pass, now, out);
        Disposition::Counted
    }

    fn try_complete_cosi(&mut self, pass: AggPhase, now: u64, out: &mut Vec<Outbound>) {
        let Some(tree) = self.cosi_tree.clone() else {
            return;
        };
        let children = tree.children(self.id);
        let Some(state) = self.cosi_state.get(&pass) else {
            return;
        };
        if state.child_aggs.len() < children.len() {
            return;
        }
        let mut agg = state.own_share.clone();
        for child_agg in state.child_aggs.values() {
            match self.keys.merge_multi(&agg, child_agg) {
                Ok(merged) => agg = merged,
                Err(_) => return,
            }
        }
        if self.id != tree.root {
            out.push(Outbound {
                to: Target::Node(tree.parent(self.id).expect("non-root has parent")),
                msg: ProtocolMessage::CosiUp {
                    height: self.height,
                    pass,
                    agg,
                },
            });
            return;
        }
        // Root: the pass is complete.
        let elapsed = now - state.started_at;
        match pass {
            AggPhase::Prepare => {
                let block_hash = self.first_proposal[&Round::FIRST].block_hash;
                let cc = CommitCert {
                    round: Round::FIRST,
                    block_hash,
                    proof: CertProof::Multi(agg),
                };
                let lock_round = self.locked.as_ref().map(|l| l.round);
                if lock_round.is_none() || cc.round >= lock_round.unwrap() {
                    self.set_lock(cc.clone());
                }
                self.committed.insert(Round::FIRST);
                self.set_spec_outcome(SpeculativeOutcome::Success {
                    prepare_elapsed: elapsed,
                    commit_elapsed: 0,
                });
                let commit_digest = cc.commit_digest(self.height);
                self.begin_cosi_pass(AggPhase::Commit, commit_digest, now);
                for child in tree.children(self.id) {
                    out.push(Outbound {
                        to: Target::Node(child),
                        msg: ProtocolMessage::CosiDown {
                            height: self.height,
                            pass: AggPhase::Commit,
                            block: None,
                            cc: Some(cc.clone()),
                            attestation: None,
                        },
                    });
                }
                self.try_complete_cosi(AggPhase::Commit, now, out);
            }
            AggPhase::Commit => {
                let Some(lock) = self.locked.clone() else {
                    return;
                };
                if let Some(SpeculativeOutcome::Success { commit_elapsed, .. }) =
                    self.spec_outcome.as_mut()
                {
                    *commit_elapsed = elapsed;
                }
                if let Some(outcome) = self.spec_outcome.clone() {
                    self.spec_history.insert(self.height, outcome);
                }
                let cert = FinalizeCert {
                    cc: lock,
                    proof: CertProof::Multi(agg),
                };
                let block = self.known_blocks[&cert.cc.block_hash].clone();
                out.push(Outbound {
                    to: Target::Broadcast,
                    msg: ProtocolMessage::FinalizeBroadcast {
                        height: self.height,
                        cert: cert.clone(),
                        block: block.clone(),
                    },
                });
                self.finalize(cert, block, now, out);
            }
        }
    }

    fn report_cosi_fault(&mut self, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        let Some(tree) = self.cosi_tree.clone() else {
            return out;
        };
        if self.id == tree.root {
            let msgs = self.cosi_fallback(now);
            out.extend(msgs);
        } else {
            out.push(Outbound {
                to: Target::Node(tree.root),
                msg: ProtocolMessage::CosiFault {
                    height: self.height,
                    reporter: self.id,
                },
            });
        }
        out
    }

    fn on_cosi_fault(
        &mut self,
        reporter: NodeId,
        now: u64,
        out: &mut Vec<Outbound>,
    ) -> Disposition {
        let Some(tree) = self.cosi_tree.clone() else {
            return Disposition::Stale;
        };
        if self.id != tree.root || self.round != Round::FIRST {
            return Disposition::Stale;
        }
        if self.cosi_failed {
            return Disposition::Duplicate;
        }
        self.set_spec_outcome(SpeculativeOutcome::Fallback { reporter });
        let msgs = self.cosi_fallback(now);
        out.extend(msgs);
        Disposition::Counted
    }

    /// Abandon the tree run and drive the same block through the collector
    /// path, still in round 1.
    fn cosi_fallback(&mut self, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        if self.cosi_failed || self.finalize_sent.contains(&Round::FIRST) {
            return out;
        }
        self.cosi_failed = true;
        if self.spec_outcome.is_none() {
            self.set_spec_outcome(SpeculativeOutcome::Fallback { reporter: self.id });
        }
        let Some(att) = self.first_proposal.get(&Round::FIRST).cloned() else {
            return out;
        };
        let block = self.known_blocks[&att.block_hash].clone();
        out.push(Outbound {
            to: Target::Broadcast,
            msg: ProtocolMessage::Preprepare {
                height: self.height,
                round: Round::FIRST,
                block,
                highest_cc: None,
                attestation: att.clone(),
            },
        });
        let own = self.own_prepare_share(Round::FIRST, &att.block_hash);
        self.record_prepare_share(Round::FIRST, att.block_hash, own);
        self.try_aggregate_prepare(Round::FIRST, att.block_hash, &mut out, now);
        out
    }

    fn finalize(&mut self, cert: FinalizeCert, block: Block, now: u64, out: &mut Vec<Outbound>) {
        // May reject: a collector that certified a block with invalid
        // transactions refuses it here like everyone else.
        let _ = self.on_finalize(cert, block, now, out);
    }
}

/// Digest a NewView share signs: height, round, and the carried lock content.
pub fn new_view_digest(height: u64, new_round: Round, locked: Option<&CommitCert>) -> HashDigest {
    let mut enc = Encoder::new().tag("nvw");
    enc.put_u64(height);
    enc.put_u32(new_round.0);
    enc.put_opt_digest(locked.map(|cc| cc.content_digest(height)).as_ref());
    crypto::hash_bytes(&enc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ThresholdKeySet;
    use crate::types::ParticipantSet;

    fn setup(n: u32) -> (ParticipantSet, ThresholdKeySet, ReplicaConfig) {
        let set = ParticipantSet::genesis(n, 100);
        let keys = ThresholdKeySet::generate(&set, crypto::hash_bytes(b"inst"), true);
        let cfg = ReplicaConfig::new(10, crypto::hash_bytes(b"genesis"), LeaderMode::Permutation);
        (set, keys, cfg)
    }

    fn replica(
        id: u32,
        set: &ParticipantSet,
        keys: &ThresholdKeySet,
        cfg: &ReplicaConfig,
    ) -> Replica {
        Replica::new(NodeId(id), cfg.clone(), set.clone(), keys.clone())
    }

    #[test]
    fn single_node_leads_every_round() {
        let set = ParticipantSet::genesis(1, 1);
        let seed = crypto::hash_bytes(b"s");
        for round in 1..20 {
            assert_eq!(
                leader_for(Round(round), &seed, &set, LeaderMode::Modular),
                NodeId(0)
            );
            assert_eq!(
                leader_for(Round(round), &seed, &set, LeaderMode::Permutation),
                NodeId(0)
            );
        }
    }

    #[test]
    fn permutation_visits_each_node_once_per_cycle() {
        let set = ParticipantSet::genesis(4, 1);
        let seed = crypto::hash_bytes(b"s");
        let leaders: BTreeSet<NodeId> = (1..=4)
            .map(|r| leader_for(Round(r), &seed, &set, LeaderMode::Permutation))
            .collect();
        assert_eq!(leaders.len(), 4);
        // The schedule repeats with period n.
        for r in 1..=4u32 {
            assert_eq!(
                leader_for(Round(r), &seed, &set, LeaderMode::Permutation),
                leader_for(Round(r + 4), &seed, &set, LeaderMode::Permutation)
            );
        }
    }

    #[test]
    fn modular_leader_frequencies_near_uniform() {
        let set = ParticipantSet::genesis(7, 1);
        let seed = crypto::hash_bytes(b"stat");
        let rounds = 1000u32;
        let mut counts = BTreeMap::new();
        for r in 1..=rounds {
            *counts
                .entry(leader_for(Round(r), &seed, &set, LeaderMode::Modular))
                .or_insert(0u32) += 1;
        }
        let expect = rounds as f64 / 7.0;
        let sigma = (rounds as f64 * (1.0 / 7.0) * (6.0 / 7.0)).sqrt();
        for (_, c) in counts {
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "count {c} outside 3 sigma of {expect}"
            );
        }
    }

    /// Drive one fault-free height by hand across four replicas, checking
    /// the exact message pattern of each step.
    #[test]
    fn ordinary_height_message_flow() {
        let (set, keys, cfg) = setup(4);
        let mut replicas: Vec<Replica> = (0..4).map(|i| replica(i, &set, &keys, &cfg)).collect();
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let lidx = leader.0 as usize;

        let out = replicas[lidx].start_height(0);
        assert_eq!(out.len(), 1, "one broadcast preprepare");
        let prep = out[0].msg.clone();
        assert!(matches!(
            &prep,
            ProtocolMessage::Preprepare {
                highest_cc: None,
                ..
            }
        ));

        // Deliver the proposal to the three non-leaders; each votes to the
        // collector.
        let mut votes = Vec::new();
        for (i, r) in replicas.iter_mut().enumerate() {
            if i == lidx {
                continue;
            }
            r.start_height(0);
            let o = r.on_message(leader, prep.clone(), 1, i as u64);
            assert_eq!(o.len(), 1);
            assert!(matches!(o[0].to, Target::Node(l) if l == leader));
            votes.push((NodeId(i as u32), o[0].msg.clone()));
        }

        // Quorum is 3 = leader's own share + 2 votes; the third vote arrives
        // after the certificate is out and must not re-trigger it.
        let o1 = replicas[lidx].on_message(votes[0].0, votes[0].1.clone(), 2, 10);
        assert!(o1.is_empty(), "below quorum, nothing emitted");
        let o2 = replicas[lidx].on_message(votes[1].0, votes[1].1.clone(), 2, 11);
        assert_eq!(o2.len(), 1, "certificate broadcast exactly once");
        let ccb = o2[0].msg.clone();
        assert!(matches!(ccb, ProtocolMessage::CCBroadcast { .. }));
        let o3 = replicas[lidx].on_message(votes[2].0, votes[2].1.clone(), 2, 12);
        assert!(o3.is_empty());

        // Certificate delivery locks replicas and produces commit votes.
        let mut commits = Vec::new();
        for (i, r) in replicas.iter_mut().enumerate() {
            if i == lidx {
                continue;
            }
            let o = r.on_message(leader, ccb.clone(), 3, 20 + i as u64);
            assert_eq!(o.len(), 1);
            assert!(r.locked.is_some(), "replica locks on the cert");
            commits.push((NodeId(i as u32), o[0].msg.clone()));
        }

        // Two commit votes + the collector's own reach quorum: finalize.
        let o = replicas[lidx].on_message(commits[0].0, commits[0].1.clone(), 4, 30);
        assert!(o.is_empty());
        let o = replicas[lidx].on_message(commits[1].0, commits[1].1.clone(), 4, 31);
        assert_eq!(o.len(), 1);
        let fin = o[0].msg.clone();
        assert!(matches!(fin, ProtocolMessage::FinalizeBroadcast { .. }));
        assert_eq!(replicas[lidx].height, 2, "collector finalized locally");
        assert_eq!(replicas[lidx].round, Round::FIRST);
        assert!(replicas[lidx].locked.is_none(), "lock cleared on finalize");

        for (i, r) in replicas.iter_mut().enumerate() {
            if i == lidx {
                continue;
            }
            r.on_message(leader, fin.clone(), 5, 40 + i as u64);
            assert_eq!(r.height, 2);
        }
        // All chains agree.
        let tip = replicas[0].tip_hash();
        assert!(replicas.iter().all(|r| r.tip_hash() == tip));
    }

    #[test]
    fn locked_replica_ignores_conflicting_proposal_without_higher_cc() {
        let (set, keys, cfg) = setup(4);
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let fid = (0..4).map(NodeId).find(|i| *i != leader).unwrap();
        let mut follower = replica(fid.0, &set, &keys, &cfg);
        follower.start_height(0);

        // Lock the follower on block A at round 1.
        let block_a = Block {
            height: 1,
            parent_hash: HashDigest::ZERO,
            proposer: leader,
            round: 1,
            txs: vec![],
        };
        let hash_a = hash_block(&block_a);
        let digest_a = CommitCert::prepare_digest(1, Round::FIRST, &hash_a);
        let shares: Vec<Signature> = (0..3)
            .map(|i| keys.sign(NodeId(i), digest_a).unwrap())
            .collect();
        let cc_a = CommitCert {
            round: Round::FIRST,
            block_hash: hash_a,
            proof: CertProof::Threshold(keys.combine_threshold(&shares).unwrap()),
        };
        follower.on_message(
            leader,
            ProtocolMessage::CCBroadcast {
                height: 1,
                cc: cc_a,
            },
            1,
            0,
        );
        assert!(follower.locked.is_some());

        // Advance to round 2 by timer, then offer a conflicting fresh block.
        let reqs = follower.take_timer_requests();
        for (gen, at) in reqs {
            follower.on_timer(gen, at);
        }
        assert_eq!(follower.round, Round(2));
        let leader2 = follower.leader_at(Round(2));
        if leader2 == follower.id {
            return; // follower proposes itself in this assignment; skip
        }
        let block_b = Block {
            height: 1,
            parent_hash: HashDigest::ZERO,
            proposer: leader2,
            round: 2,
            txs: vec![Transaction::transfer(*b"b")],
        };
        let hash_b = hash_block(&block_b);
        let att = ProposalAttestation {
            height: 1,
            round: 2,
            signer: leader2,
            block_hash: hash_b,
            sig: keys
                .sign(leader2, ProposalAttestation::signing_digest(1, 2, &hash_b))
                .unwrap(),
        };
        let out = follower.on_message(
            leader2,
            ProtocolMessage::Preprepare {
                height: 1,
                round: Round(2),
                block: block_b,
                highest_cc: None,
                attestation: att,
            },
            51,
            1,
        );
        assert!(
            out.iter()
                .all(|o| !matches!(o.msg, ProtocolMessage::PrepareVote { .. })),
            "locked replica voted for a conflicting block"
        );
    }

    #[test]
    fn higher_cc_unlocks_and_revotes() {
        let (set, keys, cfg) = setup(7);
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let probe = replica(0, &set, &keys, &cfg);
        let fid = (0..7)
            .map(NodeId)
            .find(|i| {
                *i != leader && *i != probe.leader_at(Round(2)) && *i != probe.leader_at(Round(3))
            })
            .unwrap();
        let mut follower = replica(fid.0, &set, &keys, &cfg);
        follower.start_height(0);
        let quorum = set.quorum() as u32;

        // Lock on A at round 1.
        let block_a = Block {
            height: 1,
            parent_hash: HashDigest::ZERO,
            proposer: leader,
            round: 1,
            txs: vec![],
        };
        let hash_a = hash_block(&block_a);
        let digest_a = CommitCert::prepare_digest(1, Round::FIRST, &hash_a);
        let shares_a: Vec<Signature> = (0..quorum)
            .map(|i| keys.sign(NodeId(i), digest_a).unwrap())
            .collect();
        let cc_a = CommitCert {
            round: Round::FIRST,
            block_hash: hash_a,
            proof: CertProof::Threshold(keys.combine_threshold(&shares_a).unwrap()),
        };
        follower.on_message(
            leader,
            ProtocolMessage::CCBroadcast {
                height: 1,
                cc: cc_a,
            },
            1,
            0,
        );
        assert_eq!(follower.locked.as_ref().unwrap().block_hash, hash_a);

        // Advance to round 3.
        while follower.round < Round(3) {
            let reqs = follower.take_timer_requests();
            for (gen, at) in reqs {
                follower.on_timer(gen, at);
            }
        }

        // A proposal for B arrives carrying a round-2 certificate for B: the
        // follower unlocks and votes for B.
        let leader3 = follower.leader_at(Round(3));
        let block_b = Block {
            height: 1,
            parent_hash: HashDigest::ZERO,
            proposer: follower.leader_at(Round(2)),
            round: 2,
            txs: vec![Transaction::transfer(*b"b")],
        };
        let hash_b = hash_block(&block_b);
        let digest_b = CommitCert::prepare_digest(1, Round(2), &hash_b);
        let shares_b: Vec<Signature> = (0..quorum)
            .map(|i| keys.sign(NodeId(i), digest_b).unwrap())
            .collect();
        let cc_b = CommitCert {
            round: Round(2),
            block_hash: hash_b,
            proof: CertProof::Threshold(keys.combine_threshold(&shares_b).unwrap()),
        };
        let att = ProposalAttestation {
            height: 1,
            round: 3,
            signer: leader3,
            block_hash: hash_b,
            sig: keys
                .sign(leader3, ProposalAttestation::signing_digest(1, 3, &hash_b))
                .unwrap(),
        };
        let out = follower.on_message(
            leader3,
            ProtocolMessage::Preprepare {
                height: 1,
                round: Round(3),
                block: block_b,
                highest_cc: Some(cc_b.clone()),
                attestation: att,
            },
            500,
            1,
        );
        assert!(out.iter().any(|o| matches!(
            &o.msg,
            ProtocolMessage::PrepareVote { block_hash, .. } if *block_hash == hash_b
        )));
        assert_eq!(follower.locked.as_ref().unwrap().round, Round(2));
    }

    #[test]
    fn lower_round_certificate_does_not_regress_lock() {
        let (set, keys, cfg) = setup(7);
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let fid = (0..7).map(NodeId).find(|i| *i != leader).unwrap();
        let mut follower = replica(fid.0, &set, &keys, &cfg);
        follower.start_height(0);
        let quorum = set.quorum() as u32;

        let make_cc = |round: Round, tag: &[u8]| {
            let block = Block {
                height: 1,
                parent_hash: HashDigest::ZERO,
                proposer: leader,
                round: round.0,
                txs: vec![Transaction::transfer(tag.to_vec())],
            };
            let h = hash_block(&block);
            let digest = CommitCert::prepare_digest(1, round, &h);
            let shares: Vec<Signature> = (0..quorum)
                .map(|i| keys.sign(NodeId(i), digest).unwrap())
                .collect();
            CommitCert {
                round,
                block_hash: h,
                proof: CertProof::Threshold(keys.combine_threshold(&shares).unwrap()),
            }
        };
        // Advance to round 2, lock on a round-2 certificate, then observe a
        // round-1 one.
        let reqs = follower.take_timer_requests();
        for (gen, at) in reqs {
            follower.on_timer(gen, at);
        }
        assert_eq!(follower.round, Round(2));
        let cc2 = make_cc(Round(2), b"two");
        let cc1 = make_cc(Round(1), b"one");
        follower.on_message(
            leader,
            ProtocolMessage::CCBroadcast { height: 1, cc: cc2.clone() },
            100,
            0,
        );
        assert_eq!(follower.locked.as_ref().unwrap().round, Round(2));
        let out = follower.on_message(
            leader,
            ProtocolMessage::CCBroadcast { height: 1, cc: cc1 },
            2,
            1,
        );
        assert_eq!(follower.locked.as_ref().unwrap().round, Round(2), "lock kept");
        assert_eq!(
            follower.locked.as_ref().unwrap().block_hash,
            cc2.block_hash
        );
        assert!(
            out.iter().all(|o| !matches!(o.msg, ProtocolMessage::CommitVote { .. })),
            "no commit vote for a stale-round certificate"
        );
    }

    #[test]
    fn forged_certificate_changes_nothing() {
        let (set, keys, cfg) = setup(4);
        let _ = set;
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let fid = (0..4).map(NodeId).find(|i| *i != leader).unwrap();
        let mut follower = replica(fid.0, &set, &keys, &cfg);
        follower.start_height(0);
        let forged = CommitCert {
            round: Round::FIRST,
            block_hash: crypto::hash_bytes(b"fake"),
            proof: CertProof::Threshold(ThresholdSignature {
                digest: crypto::hash_bytes(b"fake"),
                epoch: 0,
                proof: crypto::hash_bytes(b"forged"),
            }),
        };
        let out = follower.on_message(
            NodeId(3),
            ProtocolMessage::CCBroadcast {
                height: 1,
                cc: forged,
            },
            1,
            7,
        );
        assert!(out.is_empty());
        assert!(follower.locked.is_none());
        assert!(matches!(
            follower.take_dispositions().last(),
            Some((7, Disposition::Invalid))
        ));
    }

    #[test]
    fn equivocating_proposals_yield_evidence() {
        let (set, keys, cfg) = setup(4);
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let fid = (0..4).map(NodeId).find(|i| *i != leader).unwrap();
        let mut follower = replica(fid.0, &set, &keys, &cfg);
        follower.start_height(0);

        let make = |txs: Vec<Transaction>| {
            let block = Block {
                height: 1,
                parent_hash: HashDigest::ZERO,
                proposer: leader,
                round: 1,
                txs,
            };
            let h = hash_block(&block);
            let att = ProposalAttestation {
                height: 1,
                round: 1,
                signer: leader,
                block_hash: h,
                sig: keys
                    .sign(leader, ProposalAttestation::signing_digest(1, 1, &h))
                    .unwrap(),
            };
            ProtocolMessage::Preprepare {
                height: 1,
                round: Round::FIRST,
                block,
                highest_cc: None,
                attestation: att,
            }
        };
        follower.on_message(leader, make(vec![]), 1, 0);
        follower.on_message(leader, make(vec![Transaction::transfer(*b"x")]), 2, 1);
        let ev = follower.take_evidence();
        assert_eq!(ev.len(), 1);
        assert!(matches!(&ev[0], SlashEvidence::Equivocation { .. }));
        assert!(ev[0].verify(&keys, set.stake_per_member));
        assert_eq!(ev[0].offender(), leader);
    }

    #[test]
    fn non_leader_proposal_yields_evidence() {
        let (set, keys, cfg) = setup(4);
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let imposter = (0..4).map(NodeId).find(|i| *i != leader).unwrap();
        let observer = (0..4)
            .map(NodeId)
            .find(|i| *i != leader && *i != imposter)
            .unwrap();
        let mut follower = replica(observer.0, &set, &keys, &cfg);
        follower.start_height(0);

        let block = Block {
            height: 1,
            parent_hash: HashDigest::ZERO,
            proposer: imposter,
            round: 1,
            txs: vec![],
        };
        let h = hash_block(&block);
        let att = ProposalAttestation {
            height: 1,
            round: 1,
            signer: imposter,
            block_hash: h,
            sig: keys
                .sign(imposter, ProposalAttestation::signing_digest(1, 1, &h))
                .unwrap(),
        };
        let out = follower.on_message(
            imposter,
            ProtocolMessage::Preprepare {
                height: 1,
                round: Round::FIRST,
                block,
                highest_cc: None,
                attestation: att,
            },
            1,
            0,
        );
        assert!(out.is_empty(), "no vote for an illegitimate proposal");
        let ev = follower.take_evidence();
        assert_eq!(ev.len(), 1);
        assert!(matches!(&ev[0], SlashEvidence::NonLeaderProposal { .. }));
        assert!(ev[0].verify(&keys, set.stake_per_member));
    }

    #[test]
    fn timeout_sends_new_view_and_backs_off() {
        let (set, keys, cfg) = setup(4);
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let fid = (0..4)
            .map(NodeId)
            .find(|i| *i != leader)
            .expect("non-leader exists");
        let mut follower = replica(fid.0, &set, &keys, &cfg);
        follower.start_height(0);
        let reqs = follower.take_timer_requests();
        assert_eq!(reqs.len(), 1);
        let (gen, deadline) = reqs[0];
        assert_eq!(deadline, 8 * 10, "t0 = 8 * delta");

        let out = follower.on_timer(gen, deadline);
        assert_eq!(follower.round, Round(2));
        if follower.leader_at(Round(2)) != follower.id {
            let nv = out
                .iter()
                .find(|o| matches!(o.msg, ProtocolMessage::NewView { .. }))
                .expect("newview sent");
            assert!(matches!(nv.to, Target::Node(l) if l == follower.leader_at(Round(2))));
        }
        let reqs = follower.take_timer_requests();
        assert_eq!(reqs.len(), 1);
        assert_eq!(reqs[0].1, deadline + 16 * 10, "timeout doubled");
    }

    #[test]
    fn single_node_completes_heights_locally() {
        let (set, keys, cfg) = setup(1);
        let mut lone = replica(0, &set, &keys, &cfg);
        let out = lone.start_height(0);
        // Single node: the whole height completes locally. Broadcasts expand
        // to zero wire messages with no peers.
        assert!(out.iter().all(|o| matches!(o.to, Target::Broadcast)));
        assert_eq!(lone.height, 2);
        let reqs = lone.take_timer_requests();
        let before_round = lone.round;
        for (gen, at) in reqs {
            lone.on_timer(gen, at);
        }
        assert_eq!(lone.round, before_round, "stale timer had no effect");
    }

    #[test]
    fn new_view_quorum_selects_highest_cert() {
        let (set, keys, cfg) = setup(4);
        // Work out who leads round 2 and drive it directly.
        let probe = replica(0, &set, &keys, &cfg);
        let leader2 = probe.leader_at(Round(2));
        let mut leader = replica(leader2.0, &set, &keys, &cfg);
        leader.start_height(0);

        let block_a = Block {
            height: 1,
            parent_hash: HashDigest::ZERO,
            proposer: probe.leader_at(Round::FIRST),
            round: 1,
            txs: vec![],
        };
        let hash_a = hash_block(&block_a);
        let digest_a = CommitCert::prepare_digest(1, Round::FIRST, &hash_a);
        let shares: Vec<Signature> = (0..3)
            .map(|i| keys.sign(NodeId(i), digest_a).unwrap())
            .collect();
        let cc_a = CommitCert {
            round: Round::FIRST,
            block_hash: hash_a,
            proof: CertProof::Threshold(keys.combine_threshold(&shares).unwrap()),
        };

        let senders: Vec<NodeId> = (0..4).map(NodeId).filter(|i| *i != leader2).collect();
        let mut out_all = Vec::new();
        for (k, from) in senders.iter().enumerate() {
            let (lock, body) = if k == 0 {
                (Some(cc_a.clone()), Some(block_a.clone()))
            } else {
                (None, None)
            };
            let digest = new_view_digest(1, Round(2), lock.as_ref());
            let share = keys.sign(*from, digest).unwrap();
            let out = leader.on_message(
                *from,
                ProtocolMessage::NewView {
                    height: 1,
                    new_round: Round(2),
                    locked_cc: lock,
                    locked_block: body,
                    share,
                    seen: None,
                },
                5,
                k as u64,
            );
            out_all.extend(out);
        }
        // Quorum = 3: two external NewViews plus the leader's own.
        let (hcc, block) = out_all
            .iter()
            .find_map(|o| match &o.msg {
                ProtocolMessage::Preprepare {
                    highest_cc, block, ..
                } => Some((highest_cc.clone(), block.clone())),
                _ => None,
            })
            .expect("leader proposed after newview quorum");
        assert_eq!(hcc.unwrap().block_hash, hash_a, "highest cert carried");
        assert_eq!(hash_block(&block), hash_a, "locked block re-proposed");
    }

    #[test]
    fn invalid_transactions_block_finalization_and_raise_evidence() {
        let (set, keys, cfg) = setup(4);
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let fid = (0..4).map(NodeId).find(|i| *i != leader).unwrap();
        let mut follower = replica(fid.0, &set, &keys, &cfg);
        follower.start_height(0);

        let bad_block = Block {
            height: 1,
            parent_hash: HashDigest::ZERO,
            proposer: leader,
            round: 1,
            txs: vec![Transaction::Transfer {
                payload: b"bad".to_vec(),
                valid: false,
            }],
        };
        let h = hash_block(&bad_block);
        let att = ProposalAttestation {
            height: 1,
            round: 1,
            signer: leader,
            block_hash: h,
            sig: keys
                .sign(leader, ProposalAttestation::signing_digest(1, 1, &h))
                .unwrap(),
        };
        // The follower votes on the hash; validity is checked at finalize.
        let out = follower.on_message(
            leader,
            ProtocolMessage::Preprepare {
                height: 1,
                round: Round::FIRST,
                block: bad_block.clone(),
                highest_cc: None,
                attestation: att,
            },
            1,
            0,
        );
        assert!(out
            .iter()
            .any(|o| matches!(o.msg, ProtocolMessage::PrepareVote { .. })));

        let digest = CommitCert::prepare_digest(1, Round::FIRST, &h);
        let shares: Vec<Signature> = (0..3)
            .map(|i| keys.sign(NodeId(i), digest).unwrap())
            .collect();
        let cc = CommitCert {
            round: Round::FIRST,
            block_hash: h,
            proof: CertProof::Threshold(keys.combine_threshold(&shares).unwrap()),
        };
        let commit_digest = cc.commit_digest(1);
        let cshares: Vec<Signature> = (0..3)
            .map(|i| keys.sign(NodeId(i), commit_digest).unwrap())
            .collect();
        let cert = FinalizeCert {
            cc,
            proof: CertProof::Threshold(keys.combine_threshold(&cshares).unwrap()),
        };
        follower.on_message(
            leader,
            ProtocolMessage::FinalizeBroadcast {
                height: 1,
                cert,
                block: bad_block,
            },
            2,
            1,
        );
        assert_eq!(follower.height, 1, "invalid block must not finalize");
        let ev = follower.take_evidence();
        assert!(ev
            .iter()
            .any(|e| matches!(e, SlashEvidence::InvalidBlock { failing_tx: 0, .. })));
        assert!(follower.locked.is_none(), "poisoned lock released");
    }

    #[test]
    fn missed_cc_still_finalizes_from_broadcast() {
        let (set, keys, cfg) = setup(4);
        let leader = leader_for(Round::FIRST, &cfg.genesis_seed, &set, cfg.leader_mode);
        let fid = (0..4).map(NodeId).find(|i| *i != leader).unwrap();
        let mut follower = replica(fid.0, &set, &keys, &cfg);
        follower.start_height(0);

        let block = Block {
            height: 1,
            parent_hash: HashDigest::ZERO,
            proposer: leader,
            round: 1,
            txs: vec![],
        };
        let h = hash_block(&block);
        let digest = CommitCert::prepare_digest(1, Round::FIRST, &h);
        let shares: Vec<Signature> = (0..3)
            .map(|i| keys.sign(NodeId(i), digest).unwrap())
            .collect();
        let cc = CommitCert {
            round: Round::FIRST,
            block_hash: h,
            proof: CertProof::Threshold(keys.combine_threshold(&shares).unwrap()),
        };
        let commit_digest = cc.commit_digest(1);
        let cshares: Vec<Signature> = (0..3)
            .map(|i| keys.sign(NodeId(i), commit_digest).unwrap())
            .collect();
        let cert = FinalizeCert {
            cc,
            proof: CertProof::Threshold(keys.combine_threshold(&cshares).unwrap()),
        };
        // No preprepare, no certificate broadcast seen: the finalize
        // broadcast alone is self-certifying and carries the body.
        follower.on_message(
            leader,
            ProtocolMessage::FinalizeBroadcast {
                height: 1,
                cert,
                block,
            },
            3,
            0,
        );
        assert_eq!(follower.height, 2);
        assert_eq!(follower.tip_hash(), h);
    }
}
