//! LinBFT: a PBFT-derived consensus protocol with amortized-linear communication,
//! implemented as a deterministic replica state machine plus a discrete-event
//! partial-synchrony simulator.
//!
//! The protocol reaches per-height consensus in three steps (Preprepare, Prepare,
//! Commit). All-to-all broadcasts are replaced by all-to-leader gathers: the round
//! leader collects votes, aggregates them into a constant-size threshold-signature
//! certificate, and re-broadcasts the certificate. View changes are linear (each
//! node sends its locked certificate to the next leader, who re-broadcasts only
//! the highest one), leaders rotate via a VRF over the previous height's finalizing
//! threshold signature, and membership changes apply at epoch boundaries after a
//! modeled distributed key generation.
//!
//! Crate layout:
//! - [`types`]: chain, transaction, membership, and slashing vocabulary
//! - [`crypto`]: pluggable ideal crypto (hash, signatures, threshold/multi
//!   signatures, VRF, DKG cost/failure model)
//! - [`consensus`]: the per-height replica state machine
//! - [`cosi`]: the speculative tree-aggregation fast path
//! - [`epoch`]: epoch schedule, join/leave accumulation, key rollover
//! - [`simnet`]: seeded discrete-event simulator with a static rushing adversary
//! - [`metrics`]: transmission accounting and asymptotic-fit analysis
//! - [`scenario`]: scenario configuration (TOML) and validation

pub mod codec;
pub mod consensus;
pub mod cosi;
pub mod crypto;
pub mod epoch;
pub mod metrics;
pub mod scenario;
pub mod simnet;
pub mod types;


pub use consensus::{CommitCert, LeaderMode, ProtocolMessage, Replica, Round};
pub use crypto::{MultiSignature, Signature, ThresholdKeySet, ThresholdSignature};
pub use metrics::{ComplexityReport, SizeClass, TransmissionRecord};
pub use scenario::ScenarioConfig;
pub use simnet::{run_scenario, RunReport, Simulation};
pub use types::{
    Block, HashDigest, NodeId, ParticipantSet, SlashEvidence, StakeLedger, Transaction,
};
