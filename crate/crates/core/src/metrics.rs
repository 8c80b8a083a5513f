//! Exact transmission accounting and asymptotic-fit analysis.
//!
//! One unit is one constant-size message. Linear-class messages (raw share
//! lists, and anything carrying them) cost n units. Setup records carry their
//! own unit count from the DKG and key-exchange cost formulas. Invalid,
//! duplicate, and stale messages have `counted_toward_completion = false` and
//! are excluded from completion volume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{leader_for, LeaderMode, Round};
use crate::crypto;
use crate::types::{HashDigest, NodeId, ParticipantSet};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    /// Votes, certificates, threshold signatures: 1 unit.
    Constant,
    /// Share lists and other O(n) payloads: n units.
    Linear,
    /// Epoch setup (DKG, pairwise exchange): explicit unit count.
    Setup,
}

/// One wire transmission, as accounted by the simulator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransmissionRecord {
    pub height: u64,
    pub round: u32,
    pub msg_kind: &'static str,
    pub size_class: SizeClass,
    pub units: u64,
    pub counted_toward_completion: bool,
}

impl TransmissionRecord {
    pub fn message(height: u64, round: u32, msg_kind: &'static str, linear: bool, n: usize) -> Self {
        let (size_class, units) = if linear {
            (SizeClass::Linear, n as u64)
        } else {
            (SizeClass::Constant, 1)
        };
        TransmissionRecord {
            height,
            round,
            msg_kind,
            size_class,
            units,
            counted_toward_completion: true,
        }
    }

    pub fn setup(height: u64, msg_kind: &'static str, units: u64) -> Self {
        TransmissionRecord {
            height,
            round: 0,
            msg_kind,
            size_class: SizeClass::Setup,
            units,
            counted_toward_completion: true,
        }
    }
}

/// Closed-form per-height volume of the fault-free collector path:
/// Preprepare, PrepareVotes, CCBroadcast, CommitVotes, FinalizeBroadcast,
/// each n-1 constant-size transmissions. Must match the simulated count
/// exactly.
pub fn ordinary_case_volume(n: usize) -> u64 {
    5 * (n as u64 - 1)
}

/// Per-height volume of the same phases under the all-to-all baseline:
/// Prepare and Commit are broadcast by every node instead of gathered,
/// adding 2 * n * (n-1) units.
pub fn pbft_baseline_volume(n: usize) -> u64 {
    ordinary_case_volume(n) + 2 * (n as u64) * (n as u64 - 1)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FitError {
    #[error("complexity fit needs at least 4 distinct n values")]
    DegenerateSweep,
    #[error("volumes must be positive for a log-log fit")]
    NonPositiveVolume,
}

/// Least-squares slope of log(volume) against log(n).
pub fn fit_complexity(sweep: &[(usize, u64)]) -> Result<f64, FitError> {
    let mut distinct: Vec<usize> = sweep.iter().map(|(n, _)| *n).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(FitError::DegenerateSweep);
    }
    if sweep.iter().any(|(_, v)| *v == 0) {
        return Err(FitError::NonPositiveVolume);
    }
    let pts: Vec<(f64, f64)> = sweep
        .iter()
        .map(|(n, v)| ((*n as f64).ln(), (*v as f64).ln()))
        .collect();
    let m = pts.len() as f64;
    let mean_x = pts.iter().map(|(x, _)| x).sum::<f64>() / m;
    let mean_y = pts.iter().map(|(_, y)| y).sum::<f64>() / m;
    let cov: f64 = pts.iter().map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let var: f64 = pts.iter().map(|(x, _)| (x - mean_x) * (x - mean_x)).sum();
    if var == 0.0 {
        return Err(FitError::DegenerateSweep);
    }
    Ok(cov / var)
}

/// Complexity analysis across an n-sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub schema_version: u32,
    /// (n, measured completion volume per height averaged over the run).
    pub per_height_volume: Vec<(usize, u64)>,
    /// Completion volume plus epoch setup spread over the epoch length.
    pub amortized_per_block: Vec<(usize, f64)>,
    pub slope_fit: f64,
    pub baseline_volume: Vec<(usize, u64)>,
    pub baseline_slope: f64,
    pub max_malicious_prefix: u32,
    /// Set when any height in the sweep ran on the share-list fallback.
    pub dkg_degraded: bool,
}

/// Empirical frequency of runs of consecutive malicious leaders under
/// `Modular` selection. Draws a fresh corruption set of size f per height,
/// chains the per-height seeds through the hash, and measures the length of
/// the malicious prefix of each height's leader sequence.
pub struct PrefixStats {
    pub heights: u64,
    /// `freq[x]` = fraction of heights whose first x leaders were all
    /// malicious (x starting at 1).
    pub freq: Vec<f64>,
    pub max_observed: u32,
}

pub fn malicious_prefix_stats(
    set: &ParticipantSet,
    f_actual: usize,
    heights: u64,
    seed: &HashDigest,
    max_x: u32,
) -> PrefixStats {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    let mut counts = vec![0u64; max_x as usize];
    let mut max_observed = 0u32;
    let mut height_seed = *seed;
    let mut corrupt_rng = ChaCha20Rng::from_seed(*crypto::vrf_from_seed(seed, 0xc0de).as_bytes());
    for h in 0..heights {
        height_seed = crypto::vrf_from_seed(&height_seed, h);
        let mut members = set.members.clone();
        members.shuffle(&mut corrupt_rng);
        let corrupted: std::collections::BTreeSet<NodeId> =
            members.into_iter().take(f_actual).collect();
        let mut x = 0u32;
        while x < max_x {
            let leader = leader_for(Round(x + 1), &height_seed, set, LeaderMode::Modular);
            if corrupted.contains(&leader) {
                x += 1;
            } else {
                break;
            }
        }
        max_observed = max_observed.max(x);
        for i in 0..x.min(max_x) {
            counts[i as usize] += 1;
        }
    }
    PrefixStats {
        heights,
        freq: counts.iter().map(|c| *c as f64 / heights as f64).collect(),
        max_observed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(ordinary_case_volume(1), 0);
        assert_eq!(ordinary_case_volume(4), 15);
        assert_eq!(ordinary_case_volume(16), 75);
        assert_eq!(ordinary_case_volume(64), 315);
        assert_eq!(ordinary_case_volume(256), 1275);
        assert_eq!(pbft_baseline_volume(4), 15 + 24);
    }

    #[test]
    fn fit_recovers_linear_and_quadratic_exponents() {
        // Asymptotic regime: the -1 in 5(n-1) biases small-n fits upward, so
        // the slope check runs from n=16 up.
        let linear: Vec<(usize, u64)> = [16, 64, 256, 1024]
            .iter()
            .map(|&n| (n, ordinary_case_volume(n)))
            .collect();
        let slope = fit_complexity(&linear).unwrap();
        assert!((0.95..=1.05).contains(&slope), "linear slope {slope}");

        let quadratic: Vec<(usize, u64)> = [4, 16, 64, 256]
            .iter()
            .map(|&n| (n, pbft_baseline_volume(n)))
            .collect();
        let slope = fit_complexity(&quadratic).unwrap();
        assert!((1.9..=2.1).contains(&slope), "baseline slope {slope}");
    }

    #[test]
    fn fit_on_constant_data_is_flat() {
        let flat: Vec<(usize, u64)> = vec![(4, 7), (16, 7), (64, 7), (256, 7)];
        let slope = fit_complexity(&flat).unwrap();
        assert!(slope.abs() < 1e-9);
    }

    #[test]
    fn degenerate_sweeps_rejected() {
        assert_eq!(
            fit_complexity(&[(4, 15)]).unwrap_err(),
            FitError::DegenerateSweep
        );
        assert_eq!(
            fit_complexity(&[(4, 15), (4, 15), (4, 15), (4, 15)]).unwrap_err(),
            FitError::DegenerateSweep
        );
    }

    #[test]
    fn malicious_prefix_frequency_bounded() {
        // f/n close to 1/3: the frequency of >= x consecutive malicious
        // leaders stays under 3^-x plus sampling error.
        let set = ParticipantSet::genesis(16, 1);
        let stats = malicious_prefix_stats(
            &set,
            5,
            20_000,
            &crypto::hash_bytes(b"prefix-test"),
            6,
        );
        for x in 1..=6usize {
            let bound = 1.0f64 / 3f64.powi(x as i32);
            let sigma = (bound * (1.0 - bound) / stats.heights as f64).sqrt();
            assert!(
                stats.freq[x - 1] <= bound + 3.0 * sigma,
                "x={x}: freq {} > bound {} + 3s {}",
                stats.freq[x - 1],
                bound,
                3.0 * sigma
            );
        }
    }
}
