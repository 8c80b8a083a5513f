//! Epoch schedule: membership churn accumulated from finalized blocks, applied
//! at epoch boundaries together with a full key regeneration.
//!
//! Keys are never updated incrementally — a staying participant's key pair is
//! generated from scratch each epoch, because correlating old and new
//! threshold keys leaks the added secret terms to the adversary. The DKG and
//! pairwise address/key exchange costs are charged at the boundary and
//! amortize over the epoch's blocks.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::crypto::{self, ThresholdKeySet};
use crate::metrics::TransmissionRecord;
use crate::types::{Block, NodeId, ParticipantSet, StakeLedger, Transaction};

/// Pending membership request; the last request per node within an epoch wins.
#[derive(Clone, Debug, PartialEq, Eq)]
enum PendingChange {
    Join { key_material: Vec<u8>, deposit: u64 },
    Leave,
}

/// Drives epochs of `epoch_length` blocks each.
#[derive(Clone, Debug)]
pub struct EpochSchedule {
    /// Blocks per epoch; at least n, default 4n.
    pub epoch_length: u64,
    pub current_epoch: u64,
    changes: BTreeMap<NodeId, PendingChange>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EpochError {
    #[error("next participant set would have {0} members; need at least 4")]
    SetTooSmall(usize),
}

/// Result of an epoch transition.
#[derive(Debug)]
pub struct Transition {
    pub set: ParticipantSet,
    pub keys: ThresholdKeySet,
    pub ledger: StakeLedger,
    pub records: Vec<TransmissionRecord>,
    pub dkg_succeeded: bool,
}

impl EpochSchedule {
    pub fn new(epoch_length: u64) -> Self {
        EpochSchedule {
            epoch_length,
            current_epoch: 0,
            changes: BTreeMap::new(),
        }
    }

    /// Default epoch length for a set of n nodes.
    pub fn default_length(n: usize) -> u64 {
        4 * n as u64
    }

    pub fn is_boundary(&self, height: u64) -> bool {
        height > 0 && height.is_multiple_of(self.epoch_length)
    }

    pub fn pending_joins(&self) -> Vec<NodeId> {
        self.changes
            .iter()
            .filter(|(_, c)| matches!(c, PendingChange::Join { .. }))
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn pending_leaves(&self) -> Vec<NodeId> {
        self.changes
            .iter()
            .filter(|(_, c)| matches!(c, PendingChange::Leave))
            .map(|(n, _)| *n)
            .collect()
    }

    /// Accumulate the join/leave requests of a finalized block. Later
    /// requests for the same node overwrite earlier ones.
    pub fn ingest_finalized_block(&mut self, block: &Block, stake_required: u64) {
        for tx in &block.txs {
            match tx {
                Transaction::Join {
                    node,
                    key_material,
                    deposit,
                } if *deposit == stake_required => {
                    self.changes.insert(
                        *node,
                        PendingChange::Join {
                            key_material: key_material.clone(),
                            deposit: *deposit,
                        },
                    );
                }
                Transaction::Leave { node } => {
                    self.changes.insert(*node, PendingChange::Leave);
                }
                _ => {}
            }
        }
    }

    /// Apply the accumulated changes at a boundary height: compute the next
    /// membership, deposit joiners' stakes, return leavers' stakes, drop
    /// slashed nodes, and regenerate keys for the whole new set.
    pub fn epoch_transition(
        &mut self,
        height: u64,
        set: &ParticipantSet,
        ledger: &StakeLedger,
        dkg_failure_prob: f64,
        dkg_cost_constant: u64,
        rng: &mut impl Rng,
    ) -> Result<Transition, EpochError> {
        let slashed = ledger.slashed_nodes();
        let mut members: Vec<NodeId> = set
            .members
            .iter()
            .copied()
            .filter(|m| !slashed.contains(m))
            .filter(|m| !matches!(self.changes.get(m), Some(PendingChange::Leave)))
            .collect();
        let mut ledger = ledger.clone();
        for leaver in self.pending_leaves() {
            if set.contains(leaver) && !slashed.contains(&leaver) {
                ledger.withdraw(leaver);
            }
        }
        for (node, change) in &self.changes {
            if let PendingChange::Join { deposit, .. } = change {
                if !members.contains(node) && !slashed.contains(node) {
                    members.push(*node);
                    ledger.deposit(*node, *deposit);
                }
            }
        }
        members.sort_unstable();
        if members.len() < 4 {
            return Err(EpochError::SetTooSmall(members.len()));
        }

        self.current_epoch += 1;
        self.changes.clear();
        let next = ParticipantSet::new(self.current_epoch, members, set.stake_per_member)
            .expect("sorted distinct members");

        // Keys are regenerated from scratch for the full new set.
        let dkg = crypto::run_dkg(&next, dkg_failure_prob, dkg_cost_constant, rng);
        let n = next.n() as u64;
        let records = vec![
            TransmissionRecord::setup(height, "dkg", dkg.cost_units),
            TransmissionRecord::setup(height, "pairwise_exchange", n * (n - 1)),
        ];
        let dkg_succeeded = dkg.keys.valid;
        Ok(Transition {
            set: next,
            keys: dkg.keys,
            ledger,
            records,
            dkg_succeeded,
        })
    }
}

/// Amortized setup cost per block: (DKG + pairwise exchange) / epoch length.
pub fn amortized_setup_per_block(n: usize, epoch_length: u64, dkg_cost_constant: u64) -> f64 {
    let dkg = crypto::dkg_cost_units(n, dkg_cost_constant) as f64;
    let pairwise = (n as u64 * (n as u64 - 1)) as f64;
    (dkg + pairwise) / epoch_length as f64
}
