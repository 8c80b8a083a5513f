//! Deterministic discrete-event simulator: seeded event queue, partial-synchrony
//! delivery, a static rushing adversary with pluggable misbehaviors, and
//! scenario orchestration with global safety/liveness assertions.
//!
//! Everything is single-threaded and seeded: two runs with the same config
//! produce bytewise-identical reports. Events are ordered by
//! `(time, class, kind, from, to, seq)`; with a rushing adversary, deliveries
//! to corrupted nodes at a tick sort after deliveries to honest nodes, so the
//! adversary's reactions always observe the tick's honest traffic first.
//!
//! Before GST the adversary owns the delivery schedule: certificate broadcasts
//! are held back until just past the recipient's round timer (capped at
//! GST + delta), and with `drop_before_gst` honest-to-honest messages may be
//! dropped outright. From GST on, every delivery lands within delta of the
//! send, asserted per delivery.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{
    CertProof, CommitCert, Disposition, Outbound, ProtocolMessage,
    Replica, ReplicaConfig, Round, SpeculativeOutcome, Target,
};
use crate::crypto::{self, ThresholdKeySet, ThresholdSignature};
use crate::epoch::EpochSchedule;
use crate::metrics::{SizeClass, TransmissionRecord};
use crate::scenario::{Behavior, ConfigError, ScenarioConfig};
use crate::types::{
    apply_slash, hash_block, Block, HashDigest, NodeId, ParticipantSet, ProposalAttestation,
    StakeLedger, Transaction,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    ConfigInvalid(#[from] ConfigError),
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)] // Deliver dominates; boxing would cost an alloc per event
enum EventKind {
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: ProtocolMessage,
        token: u64,
    },
    TimerFire {
        node: NodeId,
        gen: u64,
    },
    HeightKick {
        node: NodeId,
        height: u64,
    },
    Inject {
        node: NodeId,
        action: InjectAction,
    },
}

#[derive(Clone, Copy, Debug)]
enum InjectAction {
    ForgeCert,
    NonLeaderPropose,
}

#[derive(Clone, Debug)]
struct ScheduledEvent {
    time: u64,
    /// Rushing: deliveries to corrupted nodes sort after honest ones.
    class: u8,
    kind_rank: u8,
    from: u32,
    to: u32,
    seq: u64,
    kind: EventKind,
}

impl ScheduledEvent {
    fn key(&self) -> (u64, u8, u8, u32, u32, u64) {
        (
            self.time,
            self.class,
            self.kind_rank,
            self.from,
            self.to,
            self.seq,
        )
    }
}

impl PartialEq for ScheduledEvent {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for ScheduledEvent {}
impl PartialOrd for ScheduledEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ScheduledEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// One send, as observed in the trace (tests assert rushing order on this).
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub time: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub kind: &'static str,
    pub adversary_origin: bool,
}

/// Per-height results.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeightRecord {
    pub height: u64,
    /// Highest certificate round that finalized the height at any replica.
    pub rounds_used: u32,
    /// Completion volume in units (counted messages only, setup excluded).
    pub volume_units: u64,
    /// Block-body dissemination, reported separately: one linear-class
    /// broadcast of n units per height.
    pub body_units: u64,
    pub started_at: u64,
    pub first_finalized_at: u64,
    pub all_finalized_at: u64,
    pub slashes: u32,
    pub speculative: Option<SpeculativeOutcome>,
    /// Whether any share-list fallback broadcast was counted at this height.
    pub fallback: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlashSummary {
    pub node: u32,
    pub height: u64,
    pub kind: String,
}

/// Machine-readable run outcome; the CLI serializes this as JSON lines.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub n: u32,
    pub seed: u64,
    pub num_heights: u64,
    pub epoch_length: u64,
    pub per_height: Vec<HeightRecord>,
    pub total_volume: u64,
    pub total_body_units: u64,
    pub setup_units: u64,
    pub dkg_attempts: u32,
    pub dkg_failures: u32,
    pub epochs_completed: u64,
    pub safety_ok: bool,
    pub liveness_ok: bool,
    pub all_heights_finalized: bool,
    pub max_malicious_prefix: u32,
    pub slashes: Vec<SlashSummary>,
    pub violations: Vec<String>,
    pub final_supply: u64,
    pub confiscated: u64,
}

impl RunReport {
    pub fn ok(&self) -> bool {
        self.safety_ok && self.liveness_ok && self.all_heights_finalized
    }
}

struct HeightStat {
    started_at: Option<u64>,
    first_finalized_at: Option<u64>,
    all_finalized_at: Option<u64>,
    finalized_by: BTreeSet<NodeId>,
    rounds_used: u32,
    slashes: u32,
    speculative: Option<SpeculativeOutcome>,
    malicious_prefix: u32,
}

impl HeightStat {
    fn new() -> Self {
        HeightStat {
            started_at: None,
            first_finalized_at: None,
            all_finalized_at: None,
            finalized_by: BTreeSet::new(),
            rounds_used: 1,
            slashes: 0,
            speculative: None,
            malicious_prefix: 0,
        }
    }
}

/// Membership and keys in force from a given height on. Lagging replicas
/// install the context matching the height they are entering, so catch-up
/// verification always uses the right epoch's keys.
struct EpochContext {
    from_height: u64,
    set: ParticipantSet,
    keys: ThresholdKeySet,
}

/// The whole simulated system.
pub struct Simulation {
    cfg: ScenarioConfig,
    pub set: ParticipantSet,
    pub keys: ThresholdKeySet,
    pub ledger: StakeLedger,
    sched: EpochSchedule,
    replicas: BTreeMap<NodeId, Replica>,
    contexts: Vec<EpochContext>,
    /// Former members kept around to serve catch-up only.
    halted: BTreeSet<NodeId>,
    started: BTreeSet<(NodeId, u64)>,
    injected: BTreeSet<(NodeId, u64)>,

    queue: BinaryHeap<Reverse<ScheduledEvent>>,
    seq: u64,
    now: u64,

    pub records: Vec<TransmissionRecord>,
    /// Token-indexed: was the sender corrupted when the message was sent?
    /// Late honest messages still count toward completion; adversary noise
    /// does not.
    sent_by_corrupted: Vec<bool>,
    pub trace: Vec<TraceEntry>,
    record_trace: bool,

    /// Corruption is a pure function of height (static adversary per block):
    /// replicas mid-height keep the set they started with even while others
    /// have moved on.
    corrupted_by_height: BTreeMap<u64, BTreeSet<NodeId>>,
    ever_corrupted: BTreeSet<NodeId>,
    behaviors: Vec<Behavior>,

    stats: BTreeMap<u64, HeightStat>,
    finalized_hashes: BTreeMap<u64, HashDigest>,
    violations: Vec<String>,
    raised_slashes: BTreeSet<(NodeId, u64, &'static str)>,

    delay_rng: ChaCha20Rng,
    dkg_rng: ChaCha20Rng,
    inject_rng: ChaCha20Rng,

    /// Latest requested timer deadline per node; the pre-GST worst-case
    /// policy aims certificate deliveries just past it.
    deadlines: BTreeMap<NodeId, u64>,
    last_delivery: BTreeMap<(NodeId, NodeId), u64>,

    dkg_attempts: u32,
    dkg_failures: u32,
    watchdog: u64,

    /// Prepare-vote log for the quorum-uniqueness audit:
    /// (height, round, voter, digest).
    pub vote_log: Vec<(u64, u32, NodeId, HashDigest)>,
}

pub fn run_scenario(cfg: ScenarioConfig) -> Result<RunReport, SimError> {
    let mut sim = Simulation::new(cfg)?;
    Ok(sim.run())
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let set = ParticipantSet::genesis(cfg.n, cfg.stake_per_member);
        let ledger = StakeLedger::new(&set);
        let sched = EpochSchedule::new(cfg.resolved_epoch_length());
        let master = cfg.seed;
        let stream = |label: &str| {
            let digest = crypto::hash_bytes(format!("linbft-sim:{label}:{master}").as_bytes());
            ChaCha20Rng::from_seed(*digest.as_bytes())
        };
        let placeholder = ThresholdKeySet::generate(&set, HashDigest::ZERO, false);
        let mut sim = Simulation {
            set,
            keys: placeholder,
            ledger,
            sched,
            replicas: BTreeMap::new(),
            contexts: Vec::new(),
            halted: BTreeSet::new(),
            started: BTreeSet::new(),
            injected: BTreeSet::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            records: Vec::new(),
            sent_by_corrupted: Vec::new(),
            trace: Vec::new(),
            record_trace: false,
            corrupted_by_height: BTreeMap::new(),
            ever_corrupted: BTreeSet::new(),
            behaviors: cfg.adversary.behaviors.clone(),
            stats: BTreeMap::new(),
            finalized_hashes: BTreeMap::new(),
            violations: Vec::new(),
            raised_slashes: BTreeSet::new(),
            delay_rng: stream("delay"),
            dkg_rng: stream("dkg"),
            inject_rng: stream("inject"),
            deadlines: BTreeMap::new(),
            last_delivery: BTreeMap::new(),
            dkg_attempts: 0,
            dkg_failures: 0,
            watchdog: 0,
            vote_log: Vec::new(),
            cfg,
        };
        sim.bootstrap();
        Ok(sim)
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn finalized_hash(&self, height: u64) -> Option<HashDigest> {
        self.finalized_hashes.get(&height).copied()
    }

    /// No fork on the participant set: any two active replicas claiming the
    /// same epoch hold identical membership.
    pub fn participant_sets_agree(&self) -> bool {
        let mut by_epoch: BTreeMap<u64, &ParticipantSet> = BTreeMap::new();
        for (id, r) in &self.replicas {
            if self.halted.contains(id) {
                continue;
            }
            match by_epoch.get(&r.set.epoch) {
                None => {
                    by_epoch.insert(r.set.epoch, &r.set);
                }
                Some(existing) if existing.members != r.set.members => return false,
                _ => {}
            }
        }
        true
    }

    fn bootstrap(&mut self) {
        let gst = if self.cfg.network.gst == u64::MAX {
            0
        } else {
            self.cfg.network.gst
        };
        self.watchdog = 100
            * (gst + self.cfg.n as u64 * self.cfg.network.delta * self.cfg.num_heights)
                .max(self.cfg.network.delta * 100);

        // Epoch-0 keys; a failed run is retried at each next height.
        self.run_dkg_attempt(0);
        self.push_context(1);

        let initially_corrupted = self.corrupted_at(1);
        let replica_cfg = self.replica_cfg();
        for member in self.set.members.clone() {
            let mut cfg = replica_cfg.clone();
            // A proposer of invalid blocks carries the poison in its own
            // schedule, so its collector state matches what it broadcasts.
            if initially_corrupted.contains(&member)
                && self.behaviors.contains(&Behavior::ProposeInvalid)
            {
                for h in 1..=self.cfg.num_heights {
                    cfg.tx_schedule.entry(h).or_default().insert(
                        0,
                        Transaction::Transfer {
                            payload: b"invalid".to_vec(),
                            valid: false,
                        },
                    );
                }
            }
            let replica = Replica::new(member, cfg, self.set.clone(), self.keys.clone());
            self.replicas.insert(member, replica);
        }
        for member in self.set.members.clone() {
            self.schedule_kick(member, 1, 0);
        }
    }

    fn push_context(&mut self, from_height: u64) {
        self.contexts.push(EpochContext {
            from_height,
            set: self.set.clone(),
            keys: self.keys.clone(),
        });
    }

    fn context_for_height(&self, height: u64) -> &EpochContext {
        self.contexts
            .iter()
            .rev()
            .find(|c| c.from_height <= height)
            .expect("context for height 1 always exists")
    }

    fn replica_cfg(&self) -> ReplicaConfig {
        let mut tx_schedule: BTreeMap<u64, Vec<Transaction>> = BTreeMap::new();
        for j in &self.cfg.joins {
            tx_schedule.entry(j.height).or_default().push(Transaction::Join {
                node: NodeId(j.node),
                key_material: j.node.to_be_bytes().to_vec(),
                deposit: self.cfg.stake_per_member,
            });
        }
        for l in &self.cfg.leaves {
            tx_schedule
                .entry(l.height)
                .or_default()
                .push(Transaction::Leave { node: NodeId(l.node) });
        }
        let mut cfg = ReplicaConfig::new(
            self.cfg.network.delta,
            self.cfg.genesis_digest(),
            self.cfg.leader_mode,
        );
        cfg.max_txs_per_block = self.cfg.max_txs_per_block;
        cfg.speculative = self.cfg.speculative;
        cfg.fanout = self.cfg.fanout;
        cfg.tx_schedule = tx_schedule;
        cfg
    }

    fn run_dkg_attempt(&mut self, height: u64) {
        let run = crypto::run_dkg(
            &self.set,
            self.cfg.dkg_failure_prob,
            self.cfg.dkg_cost_constant,
            &mut self.dkg_rng,
        );
        self.dkg_attempts += 1;
        if !run.keys.valid {
            self.dkg_failures += 1;
        }
        self.records
            .push(TransmissionRecord::setup(height, "dkg", run.cost_units));
        self.keys = run.keys;
    }

    /// Corrupted set in force at a height. With `recompute_each_height` off
    /// the height-1 draw (or the explicit list) applies to the whole run.
    fn corrupted_at(&mut self, height: u64) -> BTreeSet<NodeId> {
        use rand::seq::SliceRandom;
        let key = if self.cfg.adversary.recompute_each_height {
            height
        } else {
            1
        };
        if let Some(s) = self.corrupted_by_height.get(&key) {
            return s.clone();
        }
        let f_actual = self.cfg.adversary.f_actual as usize;
        let drawn: BTreeSet<NodeId> = if f_actual == 0 {
            BTreeSet::new()
        } else if self.cfg.adversary.corrupted.is_some() && key == 1 {
            self.cfg
                .adversary
                .corrupted
                .as_ref()
                .unwrap()
                .iter()
                .map(|i| NodeId(*i))
                .collect()
        } else {
            let digest = crypto::hash_bytes(
                format!("linbft-sim:corrupt:{}:{}", self.cfg.seed, key).as_bytes(),
            );
            let mut rng = ChaCha20Rng::from_seed(*digest.as_bytes());
            let mut members = self.context_for_height(key).set.members.clone();
            members.shuffle(&mut rng);
            members.into_iter().take(f_actual).collect()
        };
        self.ever_corrupted.extend(drawn.iter().copied());
        self.corrupted_by_height.insert(key, drawn.clone());
        drawn
    }

    fn is_corrupted_now(&mut self, node: NodeId) -> bool {
        let h = self.replicas.get(&node).map(|r| r.height).unwrap_or(1);
        self.corrupted_at(h).contains(&node)
    }

    fn schedule(&mut self, time: u64, class: u8, kind_rank: u8, from: u32, to: u32, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(ScheduledEvent {
            time,
            class,
            kind_rank,
            from,
            to,
            seq: self.seq,
            kind,
        }));
    }

    fn schedule_kick(&mut self, node: NodeId, height: u64, at: u64) {
        self.schedule(at, 0, 3, node.0, node.0, EventKind::HeightKick { node, height });
    }

    /// Run to completion and produce the report.
    pub fn run(&mut self) -> RunReport {
        let mut guard: u64 = 0;
        while let Some(Reverse(ev)) = self.queue.pop() {
            guard += 1;
            if guard > 50_000_000 {
                self.violations.push("event guard exceeded".into());
                break;
            }
            debug_assert!(ev.time >= self.now, "time must be monotone");
            self.now = ev.time;
            if self.now > self.watchdog {
                self.violations
                    .push(format!("watchdog exceeded at t={}", self.now));
                break;
            }
            match ev.kind {
                EventKind::Deliver { from, to, msg, token } => {
                    self.handle_deliver(from, to, msg, token)
                }
                EventKind::TimerFire { node, gen } => {
                    if let Some(r) = self.replicas.get_mut(&node) {
                        let out = r.on_timer(gen, self.now);
                        self.after_replica_call(node, out);
                    }
                }
                EventKind::HeightKick { node, height } => self.handle_kick(node, height),
                EventKind::Inject { node, action } => self.handle_inject(node, action),
            }
            if self.all_done() {
                break;
            }
        }
        self.finish_report()
    }

    /// Liveness target: every replica the claims cover must pass the last
    /// height. With static corruption the claims cover never-corrupted nodes;
    /// with per-height churn every non-halted member is eventually honest and
    /// must finish.
    fn all_done(&self) -> bool {
        self.set
            .members
            .iter()
            .filter(|m| !self.halted.contains(m))
            .filter(|m| {
                self.cfg.adversary.recompute_each_height || !self.ever_corrupted.contains(m)
            })
            .all(|m| {
                self.replicas
                    .get(m)
                    .is_some_and(|r| r.height > self.cfg.num_heights)
            })
    }

    fn handle_kick(&mut self, node: NodeId, height: u64) {
        if self.halted.contains(&node) {
            return;
        }
        let Some(replica) = self.replicas.get(&node) else {
            return;
        };
        if replica.height != height || !self.started.insert((node, height)) {
            return;
        }
        if height > self.cfg.num_heights {
            return;
        }
        let first_starter = {
            let stat = self.stats.entry(height).or_insert_with(HeightStat::new);
            if stat.started_at.is_none() {
                stat.started_at = Some(self.now);
                true
            } else {
                false
            }
        };
        if first_starter {
            // Leader-sequence statistic for this height, from the first
            // starter's schedule.
            let corrupted = self.corrupted_at(height);
            let replica = &self.replicas[&node];
            let mut x = 0u32;
            while x < 64 && corrupted.contains(&replica.leader_at(Round(x + 1))) {
                x += 1;
            }
            self.stats.get_mut(&height).unwrap().malicious_prefix = x;
            // Unprompted adversary actions at this height.
            for c in corrupted {
                if self.injected.insert((c, height)) {
                    if self.behaviors.contains(&Behavior::ForgeCert) {
                        self.schedule(
                            self.now + 1,
                            0,
                            4,
                            c.0,
                            c.0,
                            EventKind::Inject {
                                node: c,
                                action: InjectAction::ForgeCert,
                            },
                        );
                    }
                    if self.behaviors.contains(&Behavior::NonLeaderPropose) {
                        self.schedule(
                            self.now + 1,
                            0,
                            4,
                            c.0,
                            c.0,
                            EventKind::Inject {
                                node: c,
                                action: InjectAction::NonLeaderPropose,
                            },
                        );
                    }
                }
            }
        }
        let replica = self.replicas.get_mut(&node).unwrap();
        let out = replica.start_height(self.now);
        self.after_replica_call(node, out);
    }

    fn handle_deliver(&mut self, from: NodeId, to: NodeId, msg: ProtocolMessage, token: u64) {
        if msg.height() <= self.cfg.num_heights {
            if let ProtocolMessage::PrepareVote {
                height,
                round,
                block_hash,
                ..
            } = &msg
            {
                self.vote_log.push((*height, round.0, from, *block_hash));
            }
        }
        let Some(replica) = self.replicas.get_mut(&to) else {
            return;
        };
        let out = replica.on_message(from, msg, self.now, token);
        self.after_replica_call(to, out);
    }

    fn handle_inject(&mut self, node: NodeId, action: InjectAction) {
        if !self.is_corrupted_now(node) {
            return;
        }
        let Some(replica) = self.replicas.get(&node) else {
            return;
        };
        let height = replica.height;
        if height > self.cfg.num_heights {
            return;
        }
        match action {
            InjectAction::ForgeCert => {
                // A certificate that never had a quorum: random proof bytes.
                let mut fake = [0u8; 32];
                self.inject_rng.fill(&mut fake);
                let block_hash = HashDigest(fake);
                let round = replica.round;
                let cc = CommitCert {
                    round,
                    block_hash,
                    proof: CertProof::Threshold(ThresholdSignature {
                        digest: CommitCert::prepare_digest(height, round, &block_hash),
                        epoch: self.keys.epoch,
                        proof: crypto::vrf_from_seed(&block_hash, 0xbad),
                    }),
                };
                self.broadcast_from(node, ProtocolMessage::CCBroadcast { height, cc });
            }
            InjectAction::NonLeaderPropose => {
                let round = replica.round;
                if replica.leader_at(round) == node {
                    return; // actually the leader; nothing illegitimate to do
                }
                let block = Block {
                    height,
                    parent_hash: replica.tip_hash(),
                    proposer: node,
                    round: round.0,
                    txs: vec![],
                };
                let msg = self.signed_preprepare(node, height, round, block);
                self.broadcast_from(node, msg);
            }
        }
    }

    fn broadcast_from(&mut self, from: NodeId, msg: ProtocolMessage) {
        for to in self.set.members.clone() {
            if to != from {
                self.deliver_with_policy(from, to, msg.clone(), false);
            }
        }
    }

    /// Drain a replica's side effects: timers, dispositions, evidence,
    /// finalizations, and outbound messages (adversary-filtered).
    fn after_replica_call(&mut self, node: NodeId, out: Vec<Outbound>) {
        let reqs = self
            .replicas
            .get_mut(&node)
            .map(|r| r.take_timer_requests())
            .unwrap_or_default();
        for (gen, at) in reqs {
            self.deadlines
                .entry(node)
                .and_modify(|d| *d = (*d).max(at))
                .or_insert(at);
            self.schedule(at, 0, 2, node.0, node.0, EventKind::TimerFire { node, gen });
        }

        let dispositions = self
            .replicas
            .get_mut(&node)
            .map(|r| r.take_dispositions())
            .unwrap_or_default();
        for (token, d) in dispositions {
            let idx = token as usize;
            if let Some(rec) = self.records.get_mut(idx) {
                let honest_sender = !self.sent_by_corrupted.get(idx).copied().unwrap_or(false);
                rec.counted_toward_completion = match d {
                    Disposition::Counted => true,
                    // An honest message arriving after the receiver moved on
                    // was still a required part of the flow when sent.
                    Disposition::Stale => honest_sender,
                    Disposition::Buffered | Disposition::Duplicate | Disposition::Invalid => false,
                };
            }
        }

        // Evidence: verify against the offense height's keys and apply to the
        // global ledger, once per offense.
        let evidence = self
            .replicas
            .get_mut(&node)
            .map(|r| r.take_evidence())
            .unwrap_or_default();
        for ev in evidence {
            let key = (ev.offender(), ev.height(), ev.kind());
            if !self.raised_slashes.insert(key) {
                continue;
            }
            let height = ev.height();
            let (keys, stake) = {
                let ctx = self.context_for_height(height);
                (ctx.keys.clone(), ctx.set.stake_per_member)
            };
            if !ev.verify(&keys, stake) || !self.set.contains(ev.offender()) {
                continue;
            }
            if let Ok((ledger, set)) =
                apply_slash(self.ledger.clone(), ev, self.set.clone(), &keys)
            {
                self.ledger = ledger;
                self.set = set;
                self.stats
                    .entry(height)
                    .or_insert_with(HeightStat::new)
                    .slashes += 1;
            }
        }

        self.observe_finalizations(node);

        // Behaviors apply per message height: a replica crossing a height
        // boundary inside one call may emit messages for a height where it
        // was honest and messages for one where it is corrupted.
        let mut sends: Vec<(Target, ProtocolMessage, bool)> = Vec::new();
        for o in out {
            let h = o.msg.height();
            if self.corrupted_at(h).contains(&node) {
                sends.extend(self.adversary_filter_one(node, o));
            } else {
                sends.push((o.to, o.msg, false));
            }
        }
        for (to, msg, delay_max) in sends {
            match to {
                Target::Broadcast => {
                    for peer in self.set.members.clone() {
                        if peer != node {
                            self.deliver_with_policy(node, peer, msg.clone(), delay_max);
                        }
                    }
                }
                Target::Node(peer) => {
                    if peer != node {
                        self.deliver_with_policy(node, peer, msg, delay_max);
                    }
                }
            }
        }

        let kick = self.replicas.get_mut(&node).and_then(|r| {
            if r.pending_height_start {
                r.pending_height_start = false;
                Some(r.height)
            } else {
                None
            }
        });
        if let Some(height) = kick {
            self.schedule_kick(node, height, self.now + 1);
        }
    }

    /// Record chain growth at `node` since the last observation: safety
    /// checks, height statistics, epoch boundaries, join/leave ingestion.
    fn observe_finalizations(&mut self, node: NodeId) {
        let chain_len = match self.replicas.get(&node) {
            Some(r) => r.chain.len() as u64,
            None => return,
        };
        for h in 1..=chain_len {
            {
                let stat = self.stats.entry(h).or_insert_with(HeightStat::new);
                if stat.finalized_by.contains(&node) {
                    continue;
                }
            }
            let replica = &self.replicas[&node];
            let entry = &replica.chain[h as usize - 1];
            let hash = entry.hash;
            let block = entry.block.clone();
            let cert_round = entry.cert.cc.round.0;
            let spec = replica.spec_history.get(&h).cloned();

            match self.finalized_hashes.get(&h) {
                None => {
                    self.finalized_hashes.insert(h, hash);
                    if h > 1 {
                        let parent = self.finalized_hashes.get(&(h - 1)).copied();
                        if parent != Some(block.parent_hash) {
                            self.violations.push(format!(
                                "chain linkage broken at height {h}: parent {:?} vs finalized {:?}",
                                block.parent_hash, parent
                            ));
                        }
                    }
                    self.first_finalization(h, &block, node);
                }
                Some(existing) if *existing != hash => {
                    self.violations.push(format!(
                        "SAFETY VIOLATION: height {h} finalized as {existing:?} and {hash:?} (node {node})"
                    ));
                }
                _ => {}
            }

            let stat = self.stats.entry(h).or_insert_with(HeightStat::new);
            stat.finalized_by.insert(node);
            stat.rounds_used = stat.rounds_used.max(cert_round);
            if stat.first_finalized_at.is_none() {
                stat.first_finalized_at = Some(self.now);
            }
            stat.all_finalized_at = Some(self.now);
            if stat.speculative.is_none() {
                stat.speculative = spec;
            }

            // Entering height h+1: make sure the replica runs with that
            // height's membership and keys.
            let (ctx_epoch, ctx_instance) = {
                let ctx = self.context_for_height(h + 1);
                (ctx.set.epoch, ctx.keys.instance)
            };
            let needs_install = {
                let r = &self.replicas[&node];
                r.height == h + 1
                    && (r.set.epoch != ctx_epoch || r.keys.instance != ctx_instance)
            };
            if needs_install {
                let (set, keys) = {
                    let ctx = self.context_for_height(h + 1);
                    (ctx.set.clone(), ctx.keys.clone())
                };
                if let Some(r) = self.replicas.get_mut(&node) {
                    r.install_epoch(set, keys);
                }
            }
        }
    }

    /// Global bookkeeping the first time any replica finalizes height `h`:
    /// transaction ingestion, epoch transitions, next-height corruption draw,
    /// and DKG re-runs after failures.
    fn first_finalization(&mut self, h: u64, block: &Block, source: NodeId) {
        self.sched
            .ingest_finalized_block(block, self.set.stake_per_member);

        if self.sched.is_boundary(h) && h < self.cfg.num_heights {
            match self.sched.epoch_transition(
                h,
                &self.set,
                &self.ledger,
                self.cfg.dkg_failure_prob,
                self.cfg.dkg_cost_constant,
                &mut self.dkg_rng,
            ) {
                Ok(t) => {
                    self.dkg_attempts += 1;
                    if !t.dkg_succeeded {
                        self.dkg_failures += 1;
                    }
                    self.records.extend(t.records);
                    let old_members: BTreeSet<NodeId> =
                        self.set.members.iter().copied().collect();
                    let new_members: BTreeSet<NodeId> = t.set.members.iter().copied().collect();
                    self.set = t.set;
                    self.keys = t.keys;
                    self.ledger = t.ledger;
                    self.push_context(h + 1);

                    // Joining nodes bootstrap from the first finalizer's chain.
                    let snapshot: Vec<_> = self.replicas[&source].chain[..h as usize].to_vec();
                    let replica_cfg = self.replica_cfg();
                    for joiner in new_members.difference(&old_members) {
                        let mut r = Replica::new(
                            *joiner,
                            replica_cfg.clone(),
                            self.set.clone(),
                            self.keys.clone(),
                        );
                        r.adopt_chain(snapshot.clone());
                        r.pending_height_start = false;
                        self.replicas.insert(*joiner, r);
                        self.schedule_kick(*joiner, h + 1, self.now + 1);
                    }
                    for leaver in old_members.difference(&new_members) {
                        self.halted.insert(*leaver);
                    }
                }
                Err(e) => {
                    self.violations
                        .push(format!("epoch transition at height {h} failed: {e}"));
                }
            }
        } else if !self.keys.valid && h < self.cfg.num_heights {
            // The previous DKG failed: nodes re-run it at the next height.
            self.run_dkg_attempt(h + 1);
            self.push_context(h + 1);
        }
    }

    /// Apply the corrupted node's behaviors to one outbound message.
    /// Returns (target, message, delay-until-GST flag) triples. Producing a
    /// proposal, certificate, finalize, or fallback broadcast already means
    /// acting in the leader or collector role, so a silent leader drops those
    /// kinds outright.
    fn adversary_filter_one(
        &self,
        node: NodeId,
        o: Outbound,
    ) -> Vec<(Target, ProtocolMessage, bool)> {
        let behaviors = &self.behaviors;
        let delay_max = behaviors.contains(&Behavior::DelayMax);
        let is_tree_root = self
            .replicas
            .get(&node)
            .is_some_and(|r| self.cfg.speculative && r.leader_at(Round::FIRST) == node);

        let leader_role_msg = matches!(
            o.msg,
            ProtocolMessage::Preprepare { .. }
                | ProtocolMessage::CCBroadcast { .. }
                | ProtocolMessage::FinalizeBroadcast { .. }
                | ProtocolMessage::FallbackBroadcast { .. }
        ) || (matches!(o.msg, ProtocolMessage::CosiDown { .. }) && is_tree_root);
        if behaviors.contains(&Behavior::SilentLeader) && leader_role_msg {
            return Vec::new();
        }
        if behaviors.contains(&Behavior::VoteWithhold)
            && matches!(
                o.msg,
                ProtocolMessage::PrepareVote { .. }
                    | ProtocolMessage::CommitVote { .. }
                    | ProtocolMessage::NewView { .. }
                    | ProtocolMessage::CosiUp { .. }
            )
        {
            return Vec::new();
        }
        // Proposal rewrites apply to fresh proposals authored by the node.
        if let ProtocolMessage::Preprepare {
            height,
            round,
            block,
            highest_cc: None,
            ..
        } = &o.msg
        {
            if block.proposer == node
                && matches!(o.to, Target::Broadcast)
                && behaviors.contains(&Behavior::Equivocate)
            {
                let variant = {
                    let mut b = block.clone();
                    b.txs.push(Transaction::transfer(*b"equivocation"));
                    b
                };
                let alt = self.signed_preprepare(node, *height, *round, variant);
                let orig = o.msg.clone();
                let mut sends = Vec::new();
                for (i, peer) in self.set.members.iter().enumerate() {
                    if *peer == node {
                        continue;
                    }
                    let msg = if i % 2 == 0 { orig.clone() } else { alt.clone() };
                    sends.push((Target::Node(*peer), msg, delay_max));
                }
                return sends;
            }
        }
        vec![(o.to, o.msg, delay_max)]
    }

    fn attest_as(&self, node: NodeId, height: u64, round: u32, h: &HashDigest) -> ProposalAttestation {
        ProposalAttestation {
            height,
            round,
            signer: node,
            block_hash: *h,
            sig: self
                .keys
                .sign(node, ProposalAttestation::signing_digest(height, round, h))
                .expect("corrupted node is a member"),
        }
    }

    fn signed_preprepare(
        &self,
        node: NodeId,
        height: u64,
        round: Round,
        block: Block,
    ) -> ProtocolMessage {
        let h = hash_block(&block);
        let attestation = self.attest_as(node, height, round.0, &h);
        ProtocolMessage::Preprepare {
            height,
            round,
            block,
            highest_cc: None,
            attestation,
        }
    }

    /// Schedule one transmission: draw the delivery delay per the network
    /// model, create its accounting record, and enqueue the event.
    pub fn deliver(&mut self, from: NodeId, to: NodeId, msg: ProtocolMessage) {
        self.deliver_with_policy(from, to, msg, false)
    }

    fn deliver_with_policy(
        &mut self,
        from: NodeId,
        to: NodeId,
        msg: ProtocolMessage,
        sender_delay_max: bool,
    ) {
        let delta = self.cfg.network.delta;
        let gst = self.cfg.network.gst;
        let n = self.set.n();
        let from_corrupted = self.corrupted_at(msg.height()).contains(&from);
        let to_corrupted = self.is_corrupted_now(to);

        let token = self.records.len() as u64;
        let mut record = TransmissionRecord::message(
            msg.height(),
            msg.round().map(|r| r.0).unwrap_or(0),
            msg.kind(),
            msg.is_linear_size(),
            n,
        );

        if self.record_trace {
            self.trace.push(TraceEntry {
                time: self.now,
                from,
                to,
                kind: msg.kind(),
                adversary_origin: from_corrupted,
            });
        }

        let base_draw = 1 + self.delay_rng.gen_range(0..delta);
        let honest_pair = !from_corrupted && !to_corrupted;
        let mut deliver_at = if self.now >= gst {
            self.now + base_draw
        } else {
            // Pre-GST: the adversary owns the schedule.
            if self.cfg.network.drop_before_gst && honest_pair && self.delay_rng.gen_bool(0.5) {
                record.counted_toward_completion = false;
                self.records.push(record);
                self.sent_by_corrupted.push(from_corrupted);
                return;
            }
            let latest = gst.saturating_add(base_draw);
            if sender_delay_max {
                latest
            } else if matches!(
                msg,
                ProtocolMessage::CCBroadcast { .. }
                    | ProtocolMessage::FinalizeBroadcast { .. }
                    | ProtocolMessage::FallbackBroadcast { .. }
            ) {
                // Worst-case policy: hold certificates until just past the
                // recipient's round timer, capped at GST + delta.
                let target = self
                    .deadlines
                    .get(&to)
                    .map(|d| d + 1)
                    .unwrap_or(self.now + base_draw)
                    .max(self.now + 1);
                target.min(latest)
            } else {
                self.now + base_draw
            }
        };
        if !self.cfg.network.reorder {
            // FIFO per link, within the synchrony bound.
            let last = self.last_delivery.get(&(from, to)).copied().unwrap_or(0);
            deliver_at = deliver_at.max(last);
            if self.now >= gst {
                deliver_at = deliver_at.min(self.now + delta);
            }
        }
        self.last_delivery.insert((from, to), deliver_at);

        // Post-GST delivery bound, asserted per delivery.
        if self.now >= gst {
            assert!(
                deliver_at <= self.now + delta,
                "post-GST delivery bound violated"
            );
        }

        self.records.push(record);
        self.sent_by_corrupted.push(from_corrupted);
        let class = if self.cfg.adversary.rushing && to_corrupted {
            1
        } else {
            0
        };
        self.schedule(
            deliver_at,
            class,
            0,
            from.0,
            to.0,
            EventKind::Deliver { from, to, msg, token },
        );
    }

    fn finish_report(&mut self) -> RunReport {
        let mut per_height = Vec::new();
        let n = self.cfg.n as u64;
        let mut total_volume = 0u64;
        let mut total_body = 0u64;
        let mut all_finalized = true;
        let mut max_prefix = 0u32;

        let mut volume_by_height: BTreeMap<u64, u64> = BTreeMap::new();
        let mut fallback_by_height: BTreeMap<u64, bool> = BTreeMap::new();
        let mut setup_units = 0u64;
        for rec in &self.records {
            match rec.size_class {
                SizeClass::Setup => setup_units += rec.units,
                _ => {
                    if rec.counted_toward_completion && rec.msg_kind != "cosi_down_block" {
                        *volume_by_height.entry(rec.height).or_insert(0) += rec.units;
                        if rec.msg_kind == "fallback_broadcast" {
                            fallback_by_height.insert(rec.height, true);
                        }
                    }
                }
            }
        }

        for h in 1..=self.cfg.num_heights {
            let stat = self.stats.entry(h).or_insert_with(HeightStat::new);
            let finalized = stat.first_finalized_at.is_some();
            if !finalized {
                all_finalized = false;
            }
            max_prefix = max_prefix.max(stat.malicious_prefix);
            let volume = volume_by_height.get(&h).copied().unwrap_or(0);
            total_volume += volume;
            let body = if finalized { n } else { 0 };
            total_body += body;
            per_height.push(HeightRecord {
                height: h,
                rounds_used: stat.rounds_used,
                volume_units: volume,
                body_units: body,
                started_at: stat.started_at.unwrap_or(0),
                first_finalized_at: stat.first_finalized_at.unwrap_or(0),
                all_finalized_at: stat.all_finalized_at.unwrap_or(0),
                slashes: stat.slashes,
                speculative: stat.speculative.clone(),
                fallback: fallback_by_height.get(&h).copied().unwrap_or(false),
            });
        }

        let safety_ok = !self
            .violations
            .iter()
            .any(|v| v.contains("SAFETY VIOLATION") || v.contains("chain linkage"));
        let liveness_ok =
            all_finalized && self.violations.iter().all(|v| !v.contains("watchdog"));

        RunReport {
            schema_version: crate::scenario::SCHEMA_VERSION,
            n: self.cfg.n,
            seed: self.cfg.seed,
            num_heights: self.cfg.num_heights,
            epoch_length: self.cfg.resolved_epoch_length(),
            per_height,
            total_volume,
            total_body_units: total_body,
            setup_units,
            dkg_attempts: self.dkg_attempts,
            dkg_failures: self.dkg_failures,
            epochs_completed: self.sched.current_epoch,
            safety_ok,
            liveness_ok,
            all_heights_finalized: all_finalized,
            max_malicious_prefix: max_prefix,
            slashes: self
                .ledger
                .slashed
                .iter()
                .map(|r| SlashSummary {
                    node: r.node.0,
                    height: r.height,
                    kind: r.evidence.kind().to_string(),
                })
                .collect(),
            violations: self.violations.clone(),
            final_supply: self.ledger.total_deposits(),
            confiscated: self.ledger.confiscated,
        }
    }
}
