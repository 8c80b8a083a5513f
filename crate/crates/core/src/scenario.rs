//! Scenario configuration: the knobs a run is parameterized by, loadable from
//! TOML. Validation happens before any simulation state is built.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::LeaderMode;
use crate::crypto;
use crate::types::HashDigest;

pub const SCHEMA_VERSION: u32 = 1;

/// Partial-synchrony network model: adversary-chosen delays before GST,
/// delivery within delta after.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Post-GST delivery bound, in simulated time units.
    pub delta: u64,
    /// Global stabilization time. 0 means synchronous from the start;
    /// `u64::MAX` means never.
    #[serde(default)]
    pub gst: u64,
    /// When true, the adversary may drop honest-to-honest messages sent
    /// before GST (instead of delaying them to at most GST + delta).
    #[serde(default)]
    pub drop_before_gst: bool,
    /// When true, per-link FIFO order is relaxed and independently drawn
    /// delays may invert delivery order. Off by default: links behave like
    /// sessions, which keeps fault-free accounting exact.
    #[serde(default)]
    pub reorder: bool,
}

fn default_true() -> bool {
    true
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            delta: 10,
            gst: 0,
            drop_before_gst: false,
            reorder: false,
        }
    }
}

/// Misbehaviors a corrupted node can exhibit.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Emit nothing while holding the leader role.
    SilentLeader,
    /// Propose two block variants, split across the recipients.
    Equivocate,
    /// Delay all own sends until GST.
    DelayMax,
    /// Withhold Prepare/Commit/NewView contributions.
    VoteWithhold,
    /// Broadcast certificates that never had a quorum behind them.
    ForgeCert,
    /// Propose despite not holding the leader role.
    NonLeaderPropose,
    /// Propose blocks containing an invalid transaction.
    ProposeInvalid,
}

/// Static rushing adversary: the corrupted set is fixed before each height,
/// and its sends at a tick are sequenced after honest sends of the same tick.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    /// Number of corrupted nodes; must satisfy n >= 3 * f_actual + 1.
    #[serde(default)]
    pub f_actual: u32,
    /// Explicit corrupted set; drawn seeded when absent.
    #[serde(default)]
    pub corrupted: Option<Vec<u32>>,
    /// Behaviors applied to every corrupted node.
    #[serde(default)]
    pub behaviors: Vec<Behavior>,
    #[serde(default = "default_true")]
    pub rushing: bool,
    /// Redraw the corrupted set at every height boundary (honesty may change
    /// from block to block).
    #[serde(default)]
    pub recompute_each_height: bool,
}

/// A membership request scheduled for inclusion at a height.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembershipEvent {
    pub height: u64,
    pub node: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub n: u32,
    pub num_heights: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_leader_mode")]
    pub leader_mode: LeaderMode,
    #[serde(default)]
    pub speculative: bool,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub adversary: AdversarySpec,
    /// Blocks per epoch; 0 resolves to 4n.
    #[serde(default)]
    pub epoch_length: u64,
    #[serde(default)]
    pub dkg_failure_prob: f64,
    #[serde(default = "default_one")]
    pub dkg_cost_constant: u64,
    /// Negligible-probability threshold; knobs defaulting to "negligible" use
    /// this value.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_max_txs")]
    pub max_txs_per_block: usize,
    /// Hex digest seeding height 1's leader schedule.
    #[serde(default = "default_genesis_seed")]
    pub genesis_seed: String,
    #[serde(default = "default_stake")]
    pub stake_per_member: u64,
    /// Join requests to schedule as transactions.
    #[serde(default)]
    pub joins: Vec<MembershipEvent>,
    /// Leave requests to schedule as transactions.
    #[serde(default)]
    pub leaves: Vec<MembershipEvent>,
    /// Tree fanout for the speculative path.
    #[serde(default = "default_fanout")]
    pub fanout: usize,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_leader_mode() -> LeaderMode {
    LeaderMode::Permutation
}
fn default_one() -> u64 {
    1
}
fn default_rho() -> f64 {
    1e-18
}
fn default_max_txs() -> usize {
    64
}
fn default_stake() -> u64 {
    100
}
fn default_fanout() -> usize {
    2
}
fn default_genesis_seed() -> String {
    crypto::hash_bytes(b"linbft-genesis").to_hex()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("unsupported schema_version {0}")]
    SchemaVersion(u32),
    #[error("n must be at least 1")]
    NoNodes,
    #[error("n={n} violates n >= 3f+1 for f_actual={f_actual}")]
    TooManyFaults { n: u32, f_actual: u32 },
    #[error("corrupted list must have f_actual entries with ids below n")]
    BadCorruptedList,
    #[error("num_heights must be at least 1")]
    NoHeights,
    #[error("delta must be at least 1")]
    BadDelta,
    #[error("epoch_length {got} must be at least n = {n}")]
    EpochTooShort { got: u64, n: u32 },
    #[error("{0} must be a probability in [0, 1]")]
    BadProbability(&'static str),
    #[error("genesis_seed must be a 64-char hex digest")]
    BadGenesisSeed,
    #[error("fanout must be at least 2")]
    BadFanout,
    #[error("config does not parse: {0}")]
    Parse(String),
}

impl ScenarioConfig {
    /// Minimal valid config; tests and the sweep command start from this.
    pub fn basic(n: u32, num_heights: u64, seed: u64) -> Self {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            n,
            num_heights,
            seed,
            leader_mode: LeaderMode::Permutation,
            speculative: false,
            network: NetworkConfig::default(),
            adversary: AdversarySpec::default(),
            epoch_length: 0,
            dkg_failure_prob: 0.0,
            dkg_cost_constant: 1,
            rho: 1e-18,
            max_txs_per_block: 64,
            genesis_seed: default_genesis_seed(),
            stake_per_member: 100,
            joins: Vec::new(),
            leaves: Vec::new(),
            fanout: 2,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion(self.schema_version));
        }
        if self.n == 0 {
            return Err(ConfigError::NoNodes);
        }
        if self.n < 3 * self.adversary.f_actual + 1 {
            return Err(ConfigError::TooManyFaults {
                n: self.n,
                f_actual: self.adversary.f_actual,
            });
        }
        if let Some(corrupted) = &self.adversary.corrupted {
            let distinct: std::collections::BTreeSet<_> = corrupted.iter().collect();
            if corrupted.len() != self.adversary.f_actual as usize
                || distinct.len() != corrupted.len()
                || corrupted.iter().any(|c| *c >= self.n)
            {
                return Err(ConfigError::BadCorruptedList);
            }
        }
        if self.num_heights == 0 {
            return Err(ConfigError::NoHeights);
        }
        if self.network.delta == 0 {
            return Err(ConfigError::BadDelta);
        }
        let epoch_length = self.resolved_epoch_length();
        if epoch_length < self.n as u64 {
            return Err(ConfigError::EpochTooShort {
                got: epoch_length,
                n: self.n,
            });
        }
        if !(0.0..=1.0).contains(&self.dkg_failure_prob) {
            return Err(ConfigError::BadProbability("dkg_failure_prob"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(ConfigError::BadProbability("rho"));
        }
        if HashDigest::from_hex(&self.genesis_seed).is_err() {
            return Err(ConfigError::BadGenesisSeed);
        }
        if self.fanout < 2 {
            return Err(ConfigError::BadFanout);
        }
        Ok(())
    }

    pub fn resolved_epoch_length(&self) -> u64 {
        if self.epoch_length == 0 {
            crate::epoch::EpochSchedule::default_length(self.n as usize)
        } else {
            self.epoch_length
        }
    }

    pub fn genesis_digest(&self) -> HashDigest {
        HashDigest::from_hex(&self.genesis_seed).expect("validated")
    }
}
