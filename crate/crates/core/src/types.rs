//! Chain, transaction, membership, and slashing vocabulary shared by every
//! other module.
//!
//! All types are plain values: they are safe to share read-only across threads,
//! and every mutation happens inside the single-threaded simulator loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::crypto::{self, Signature, ThresholdKeySet};

/// Fixed-length opaque digest. Equality is bytewise.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HashDigest(#[serde(with = "digest_hex")] pub [u8; 32]);

impl HashDigest {
    pub const ZERO: HashDigest = HashDigest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let bytes = hex::decode(s)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| hex::FromHexError::InvalidStringLength)?;
        Ok(HashDigest(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Interpret the first eight bytes as a big-endian integer. Used for
    /// modular reductions in leader selection.
    pub fn as_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().unwrap())
    }
}

impl fmt::Debug for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_hex())
    }
}

mod digest_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

/// Stable node identity. New joiners receive fresh identities; position within
/// an epoch's participant set is computed, not stored.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Chain payload. Join/leave requests ride as ordinary transactions so that
/// membership changes go through consensus like everything else.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Transaction {
    /// Opaque value transfer. `valid` models transaction-level validity: the
    /// payload semantics are out of scope, so a proposer (or the adversary)
    /// simply marks whether the transaction passes verification.
    Transfer { payload: Vec<u8>, valid: bool },
    /// Request to join the participant set at the next epoch boundary,
    /// carrying public-key material and the stake deposit.
    Join {
        node: NodeId,
        key_material: Vec<u8>,
        deposit: u64,
    },
    /// Request to leave the participant set at the next epoch boundary.
    Leave { node: NodeId },
}

impl Transaction {
    pub fn transfer(payload: impl Into<Vec<u8>>) -> Self {
        Transaction::Transfer {
            payload: payload.into(),
            valid: true,
        }
    }

    /// Transaction-level validity. Joins must deposit exactly the scenario's
    /// per-member stake; leaves are structurally valid.
    pub fn is_valid(&self, stake_required: u64) -> bool {
        match self {
            Transaction::Transfer { valid, .. } => *valid,
            Transaction::Join { deposit, .. } => *deposit == stake_required,
            Transaction::Leave { .. } => true,
        }
    }

    fn encode(&self, enc: &mut Encoder) {
        match self {
            Transaction::Transfer { payload, valid } => {
                enc.put_u8(0);
                enc.put_bytes(payload);
                enc.put_u8(u8::from(*valid));
            }
            Transaction::Join {
                node,
                key_material,
                deposit,
            } => {
                enc.put_u8(1);
                enc.put_u32(node.0);
                enc.put_bytes(key_material);
                enc.put_u64(*deposit);
            }
            Transaction::Leave { node } => {
                enc.put_u8(2);
                enc.put_u32(node.0);
            }
        }
    }
}

/// A block proposed at one height. The hash covers every field, so any
/// single-field change alters the digest.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub parent_hash: HashDigest,
    pub proposer: NodeId,
    /// Round index in which the block was first proposed.
    pub round: u32,
    pub txs: Vec<Transaction>,
}

impl Block {
    /// First invalid transaction under the given stake rule, if any.
    pub fn first_invalid_tx(&self, stake_required: u64) -> Option<u32> {
        self.txs
            .iter()
            .position(|tx| !tx.is_valid(stake_required))
            .map(|i| i as u32)
    }
}

/// Canonical block digest: length-prefixed field concatenation in declaration
/// order, hashed by the crypto provider.
pub fn hash_block(b: &Block) -> HashDigest {
    let mut enc = Encoder::new().tag("blk");
    enc.put_u64(b.height);
    enc.put_digest(&b.parent_hash);
    enc.put_u32(b.proposer.0);
    enc.put_u32(b.round);
    enc.put_u32(b.txs.len() as u32);
    for tx in &b.txs {
        tx.encode(&mut enc);
    }
    crypto::hash_bytes(&enc.finish())
}

/// Epoch membership: the ordered node set plus the derived fault-tolerance
/// parameters. `f = (n - 1) / 3`, so `n >= 3f + 1` holds by construction.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ParticipantSet {
    pub epoch: u64,
    pub members: Vec<NodeId>,
    pub stake_per_member: u64,
}

impl ParticipantSet {
    /// Build a set from distinct members. Members are kept in the given order;
    /// epoch transitions produce sorted member lists for determinism.
    pub fn new(epoch: u64, members: Vec<NodeId>, stake_per_member: u64) -> Result<Self, TypeError> {
        if members.is_empty() {
            return Err(TypeError::EmptySet);
        }
        let distinct: BTreeSet<_> = members.iter().collect();
        if distinct.len() != members.len() {
            return Err(TypeError::DuplicateMembers);
        }
        Ok(ParticipantSet {
            epoch,
            members,
            stake_per_member,
        })
    }

    /// Initial set with identities `0..n`.
    pub fn genesis(n: u32, stake_per_member: u64) -> Self {
        ParticipantSet::new(0, (0..n).map(NodeId).collect(), stake_per_member)
            .expect("nonempty genesis set")
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    /// Tolerated Byzantine faults.
    pub fn f(&self) -> usize {
        (self.n() - 1) / 3
    }

    /// Quorum size `2f + 1`.
    pub fn quorum(&self) -> usize {
        2 * self.f() + 1
    }

    /// Threshold-signature parameter `t = 2f`; combining needs `t + 1` shares.
    pub fn threshold(&self) -> usize {
        2 * self.f()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }

    pub fn position(&self, node: NodeId) -> Option<usize> {
        self.members.iter().position(|m| *m == node)
    }
}

/// One slash on record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlashRecord {
    pub node: NodeId,
    pub height: u64,
    pub evidence: SlashEvidence,
}

/// Deposit bookkeeping. Slashed deposits go to a black hole (`confiscated`);
/// withdrawn deposits leave the staking system but are tracked so token
/// conservation stays checkable: `deposits + confiscated + withdrawn == issued`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StakeLedger {
    pub deposits: BTreeMap<NodeId, u64>,
    pub slashed: Vec<SlashRecord>,
    pub confiscated: u64,
    pub withdrawn: u64,
    pub issued: u64,
}

impl StakeLedger {
    pub fn new(set: &ParticipantSet) -> Self {
        let deposits: BTreeMap<NodeId, u64> = set
            .members
            .iter()
            .map(|m| (*m, set.stake_per_member))
            .collect();
        let issued = deposits.values().sum();
        StakeLedger {
            deposits,
            slashed: Vec::new(),
            confiscated: 0,
            withdrawn: 0,
            issued,
        }
    }

    pub fn deposit(&mut self, node: NodeId, amount: u64) {
        *self.deposits.entry(node).or_insert(0) += amount;
        self.issued += amount;
    }

    /// Return a leaving member's deposit.
    pub fn withdraw(&mut self, node: NodeId) {
        if let Some(amount) = self.deposits.remove(&node) {
            self.withdrawn += amount;
        }
    }

    pub fn total_deposits(&self) -> u64 {
        self.deposits.values().sum()
    }

    pub fn slashed_nodes(&self) -> BTreeSet<NodeId> {
        self.slashed.iter().map(|r| r.node).collect()
    }

    /// Token conservation: nothing is created or destroyed outside the ledger.
    pub fn conserved(&self) -> bool {
        self.total_deposits() + self.confiscated + self.withdrawn == self.issued
    }
}

/// A leader-signed proposal header, extracted from a Preprepare. Two of these
/// for the same `(height, round, signer)` with different hashes prove
/// equivocation; one of them from a non-leader proves an illegitimate proposal.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ProposalAttestation {
    pub height: u64,
    pub round: u32,
    pub signer: NodeId,
    pub block_hash: HashDigest,
    pub sig: Signature,
}

impl ProposalAttestation {
    pub fn signing_digest(height: u64, round: u32, block_hash: &HashDigest) -> HashDigest {
        let mut enc = Encoder::new().tag("prop");
        enc.put_u64(height);
        enc.put_u32(round);
        enc.put_digest(block_hash);
        crypto::hash_bytes(&enc.finish())
    }

    pub fn verify(&self, keys: &ThresholdKeySet) -> bool {
        let digest = Self::signing_digest(self.height, self.round, &self.block_hash);
        self.sig.signer == self.signer
            && self.sig.digest == digest
            && keys.verify(&self.sig)
    }
}

/// Self-certifying misbehavior evidence: any node can check it from the
/// contained signatures plus the epoch's key set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum SlashEvidence {
    /// Two signed proposals, same height and round, different hashes.
    Equivocation {
        first: ProposalAttestation,
        second: ProposalAttestation,
    },
    /// A signed proposal from a node that was not the round's leader.
    NonLeaderProposal {
        proposal: ProposalAttestation,
        expected_leader: NodeId,
    },
    /// A proposed block containing an invalid transaction, with the failing
    /// index and the proposer's signature tying the block to its author.
    InvalidBlock {
        block: Block,
        failing_tx: u32,
        attestation: ProposalAttestation,
    },
}

impl SlashEvidence {
    pub fn offender(&self) -> NodeId {
        match self {
            SlashEvidence::Equivocation { first, .. } => first.signer,
            SlashEvidence::NonLeaderProposal { proposal, .. } => proposal.signer,
            SlashEvidence::InvalidBlock { attestation, .. } => attestation.signer,
        }
    }

    pub fn height(&self) -> u64 {
        match self {
            SlashEvidence::Equivocation { first, .. } => first.height,
            SlashEvidence::NonLeaderProposal { proposal, .. } => proposal.height,
            SlashEvidence::InvalidBlock { attestation, .. } => attestation.height,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SlashEvidence::Equivocation { .. } => "equivocation",
            SlashEvidence::NonLeaderProposal { .. } => "non_leader_proposal",
            SlashEvidence::InvalidBlock { .. } => "invalid_block",
        }
    }

    /// Check the contained signatures and internal consistency.
    pub fn verify(&self, keys: &ThresholdKeySet, stake_required: u64) -> bool {
        match self {
            SlashEvidence::Equivocation { first, second } => {
                first.height == second.height
                    && first.round == second.round
                    && first.signer == second.signer
                    && first.block_hash != second.block_hash
                    && first.verify(keys)
                    && second.verify(keys)
            }
            SlashEvidence::NonLeaderProposal {
                proposal,
                expected_leader,
            } => proposal.signer != *expected_leader && proposal.verify(keys),
            SlashEvidence::InvalidBlock {
                block,
                failing_tx,
                attestation,
            } => {
                attestation.block_hash == hash_block(block)
                    && attestation.verify(keys)
                    && block
                        .txs
                        .get(*failing_tx as usize)
                        .is_some_and(|tx| !tx.is_valid(stake_required))
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("participant set must not be empty")]
    EmptySet,
    #[error("participant set members must be distinct")]
    DuplicateMembers,
    #[error("evidence does not verify")]
    InvalidEvidence,
    #[error("offender is not a member of the participant set")]
    NotAMember,
}

/// Confiscate a cheater's deposit and record the slash. Membership removal
/// happens at the next epoch boundary; the current set is returned unchanged
/// so quorum math stays stable mid-epoch. A second slash against an already
/// slashed node records the evidence but moves no tokens.
pub fn apply_slash(
    mut ledger: StakeLedger,
    ev: SlashEvidence,
    set: ParticipantSet,
    keys: &ThresholdKeySet,
) -> Result<(StakeLedger, ParticipantSet), TypeError> {
    if !ev.verify(keys, set.stake_per_member) {
        return Err(TypeError::InvalidEvidence);
    }
    let offender = ev.offender();
    if !set.contains(offender) {
        return Err(TypeError::NotAMember);
    }
    if let Some(deposit) = ledger.deposits.get_mut(&offender) {
        ledger.confiscated += *deposit;
        *deposit = 0;
    }
    ledger.slashed.push(SlashRecord {
        node: offender,
        height: ev.height(),
        evidence: ev,
    });
    Ok((ledger, set))
}
