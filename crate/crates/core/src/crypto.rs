//! Pluggable cryptography with a deterministic "ideal" scheme.
//!
//! The ideal scheme gives exactly the properties the protocol relies on —
//! signature uniqueness, constant-size threshold aggregates, VRF uniformity,
//! API-level unforgeability — without pairing arithmetic: a signature is the
//! hash of a per-node secret and the message digest, and a threshold signature
//! is the hash of a group secret that only [`ThresholdKeySet::combine_threshold`]
//! touches, after counting `t + 1` verified distinct shares. A real BLS backend
//! can replace this behind the same surface.
//!
//! Distributed key generation is modeled, not implemented: it has a
//! transmission cost of `c * n * ceil(log2 n)^3` units and a configurable
//! failure probability drawn from the seeded run RNG.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::Encoder;
use crate::types::{HashDigest, NodeId, ParticipantSet};

/// The provider's hash operation. Every `HashDigest` in the system comes from
/// here.
pub fn hash_bytes(bytes: &[u8]) -> HashDigest {
    let out = Sha256::digest(bytes);
    HashDigest(out.into())
}

fn hash_parts(tag: &str, parts: &[&[u8]]) -> HashDigest {
    let mut enc = Encoder::new().tag(tag);
    for p in parts {
        enc.put_bytes(p);
    }
    hash_bytes(&enc.finish())
}

/// An individual signature share. Deterministic per `(signer, digest)`:
/// signing the same digest twice yields identical bytes, the uniqueness
/// property the VRF construction needs.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Signature {
    pub signer: NodeId,
    pub digest: HashDigest,
    pub proof: HashDigest,
}

/// Constant-size aggregate: verifies iff combined from at least `t + 1`
/// distinct valid shares. Reveals no signer identities.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ThresholdSignature {
    pub digest: HashDigest,
    pub epoch: u64,
    pub proof: HashDigest,
}

impl ThresholdSignature {
    /// Canonical wire size in bytes; independent of `n` by construction.
    pub fn encoded_len(&self) -> usize {
        let mut enc = Encoder::new();
        enc.put_u64(self.epoch);
        enc.put_digest(&self.digest);
        enc.put_digest(&self.proof);
        enc.finish().len()
    }
}

/// Aggregate with an explicit signer set; the speculative path uses it only
/// when the bitmap covers all `n` nodes.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct MultiSignature {
    pub digest: HashDigest,
    pub epoch: u64,
    pub signers: BTreeSet<NodeId>,
    pub proof: HashDigest,
}

/// Epoch key material: per-node share handles plus the group handle, all
/// derived from one instance nonce so that every replica computing the same
/// seeded DKG arrives at the same keys without coordination.
#[derive(Clone, Debug)]
pub struct ThresholdKeySet {
    pub epoch: u64,
    pub n: usize,
    /// Combining needs `t + 1` shares; `t = 2f`.
    pub t: usize,
    pub members: Vec<NodeId>,
    /// Public nonce distinguishing DKG runs (re-runs after failure get a fresh
    /// instance and therefore fresh keys).
    pub instance: HashDigest,
    pub group_public: HashDigest,
    /// DKG success flag. When false, combine operations fail deterministically
    /// and the protocol falls back to unaggregated signatures.
    pub valid: bool,
    group_secret: HashDigest,
}

impl ThresholdKeySet {
    pub fn generate(set: &ParticipantSet, instance: HashDigest, valid: bool) -> Self {
        let group_secret = hash_parts(
            "grp",
            &[instance.as_bytes(), &set.epoch.to_be_bytes()],
        );
        let group_public = hash_parts("gpk", &[group_secret.as_bytes()]);
        ThresholdKeySet {
            epoch: set.epoch,
            n: set.n(),
            t: set.threshold(),
            members: set.members.clone(),
            instance,
            group_public,
            valid,
            group_secret,
        }
    }

    fn node_secret(&self, node: NodeId) -> HashDigest {
        hash_parts(
            "nsk",
            &[
                self.instance.as_bytes(),
                &self.epoch.to_be_bytes(),
                &node.0.to_be_bytes(),
            ],
        )
    }

    fn share_proof(&self, node: NodeId, digest: &HashDigest) -> HashDigest {
        hash_parts(
            "sig",
            &[self.node_secret(node).as_bytes(), digest.as_bytes()],
        )
    }

    /// Sign a digest with a member's epoch key.
    pub fn sign(&self, node: NodeId, digest: HashDigest) -> Result<Signature, CryptoError> {
        if !self.members.contains(&node) {
            return Err(CryptoError::NoKey(node));
        }
        Ok(Signature {
            signer: node,
            digest,
            proof: self.share_proof(node, &digest),
        })
    }

    /// Verify an individual share against its claimed signer and digest.
    pub fn verify(&self, sig: &Signature) -> bool {
        self.members.contains(&sig.signer)
            && sig.proof == self.share_proof(sig.signer, &sig.digest)
    }

    /// Combine shares into a constant-size threshold signature. Shares are
    /// deduplicated by signer and individually verified; only valid distinct
    /// shares count toward the `t + 1` quorum.
    pub fn combine_threshold(
        &self,
        shares: &[Signature],
    ) -> Result<ThresholdSignature, CryptoError> {
        let digest = shares.first().map(|s| s.digest).ok_or(CryptoError::EmptyShares)?;
        if shares.iter().any(|s| s.digest != digest) {
            return Err(CryptoError::MixedDigests);
        }
        let mut signers = BTreeSet::new();
        for share in shares {
            if self.verify(share) {
                signers.insert(share.signer);
            }
        }
        if signers.len() < self.t + 1 {
            return Err(CryptoError::InsufficientShares {
                got: signers.len(),
                need: self.t + 1,
            });
        }
        if !self.valid {
            return Err(CryptoError::DkgFailed);
        }
        Ok(ThresholdSignature {
            digest,
            epoch: self.epoch,
            proof: hash_parts(
                "tsg",
                &[self.group_secret.as_bytes(), digest.as_bytes()],
            ),
        })
    }

    /// True iff `ts` was combined from at least `t + 1` valid shares over
    /// `digest` under this key set.
    pub fn verify_threshold(&self, ts: &ThresholdSignature, digest: &HashDigest) -> bool {
        self.valid
            && ts.epoch == self.epoch
            && ts.digest == *digest
            && ts.proof
                == hash_parts(
                    "tsg",
                    &[self.group_secret.as_bytes(), digest.as_bytes()],
                )
    }

    /// Aggregate shares into a multi-signature with an explicit signer set.
    pub fn combine_multi(&self, shares: &[Signature]) -> Result<MultiSignature, CryptoError> {
        let digest = shares.first().map(|s| s.digest).ok_or(CryptoError::EmptyShares)?;
        if shares.iter().any(|s| s.digest != digest) {
            return Err(CryptoError::MixedDigests);
        }
        let mut signers = BTreeSet::new();
        for share in shares {
            if !self.verify(share) {
                return Err(CryptoError::InvalidShare(share.signer));
            }
            signers.insert(share.signer);
        }
        let proof = self.multi_proof(&digest, &signers);
        Ok(MultiSignature {
            digest,
            epoch: self.epoch,
            signers,
            proof,
        })
    }

    /// Merge two aggregates over the same digest with disjoint signer sets.
    /// Tree aggregation folds subtree aggregates upward with this.
    pub fn merge_multi(
        &self,
        a: &MultiSignature,
        b: &MultiSignature,
    ) -> Result<MultiSignature, CryptoError> {
        if a.digest != b.digest {
            return Err(CryptoError::MixedDigests);
        }
        if let Some(dup) = a.signers.intersection(&b.signers).next() {
            return Err(CryptoError::OverlappingSigners(*dup));
        }
        let signers: BTreeSet<NodeId> = a.signers.union(&b.signers).copied().collect();
        let mut proof = [0u8; 32];
        for (out, (x, y)) in proof
            .iter_mut()
            .zip(a.proof.as_bytes().iter().zip(b.proof.as_bytes()))
        {
            *out = x ^ y;
        }
        Ok(MultiSignature {
            digest: a.digest,
            epoch: self.epoch,
            signers,
            proof: HashDigest(proof),
        })
    }

    /// True iff every node in the signer set signed the digest.
    pub fn verify_multi(&self, ms: &MultiSignature, digest: &HashDigest) -> bool {
        ms.epoch == self.epoch
            && ms.digest == *digest
            && !ms.signers.is_empty()
            && ms.signers.iter().all(|s| self.members.contains(s))
            && ms.proof == self.multi_proof(digest, &ms.signers)
    }

    /// XOR of the per-signer multi-signature share proofs: order-independent,
    /// so disjoint aggregates merge without access to the raw shares.
    fn multi_proof(&self, digest: &HashDigest, signers: &BTreeSet<NodeId>) -> HashDigest {
        let mut acc = [0u8; 32];
        for s in signers {
            let p = hash_parts(
                "msh",
                &[self.node_secret(*s).as_bytes(), digest.as_bytes()],
            );
            for (out, byte) in acc.iter_mut().zip(p.as_bytes()) {
                *out ^= byte;
            }
        }
        HashDigest(acc)
    }
}

/// VRF output: hash of a threshold signature, tagged. Deterministic, and
/// uniform over the digest space for the ideal hash.
pub fn vrf_output(ts: &ThresholdSignature, tag: u64) -> HashDigest {
    vrf_from_seed(&ts.proof, tag)
}

/// Same construction applied to an already-extracted seed digest.
pub fn vrf_from_seed(seed: &HashDigest, tag: u64) -> HashDigest {
    hash_parts("vrf", &[seed.as_bytes(), &tag.to_be_bytes()])
}

/// Ceiling of log2, with `ceil_log2(1) == 0`.
pub fn ceil_log2(n: usize) -> u32 {
    match n {
        0 | 1 => 0,
        _ => 64 - ((n - 1) as u64).leading_zeros(),
    }
}

/// Transmission cost of one modeled DKG run: `c * n * ceil(log2 n)^3` units.
pub fn dkg_cost_units(n: usize, cost_constant: u64) -> u64 {
    let log = ceil_log2(n) as u64;
    cost_constant * n as u64 * log * log * log
}

/// Outcome of one modeled DKG run.
pub struct DkgRun {
    pub keys: ThresholdKeySet,
    pub cost_units: u64,
}

/// Model a DKG run: fresh keys with `valid = true` with probability
/// `1 - failure_prob`, plus the accounting cost. Failure is an outcome, not an
/// error; the caller re-runs at the next height.
pub fn run_dkg(
    set: &ParticipantSet,
    failure_prob: f64,
    cost_constant: u64,
    rng: &mut impl Rng,
) -> DkgRun {
    let mut nonce = [0u8; 32];
    rng.fill(&mut nonce);
    let valid = rng.gen::<f64>() >= failure_prob;
    DkgRun {
        keys: ThresholdKeySet::generate(set, HashDigest(nonce), valid),
        cost_units: dkg_cost_units(set.n(), cost_constant),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("node {0} holds no key for this epoch")]
    NoKey(NodeId),
    #[error("no shares supplied")]
    EmptyShares,
    #[error("shares cover different digests")]
    MixedDigests,
    #[error("{got} distinct valid shares, need {need}")]
    InsufficientShares { got: usize, need: usize },
    #[error("share from {0} does not verify")]
    InvalidShare(NodeId),
    #[error("signer {0} appears in both aggregates")]
    OverlappingSigners(NodeId),
    #[error("epoch keys are invalid (DKG failure)")]
    DkgFailed,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn keys(n: u32) -> ThresholdKeySet {
        let set = ParticipantSet::genesis(n, 1);
        ThresholdKeySet::generate(&set, hash_bytes(b"inst"), true)
    }

    fn shares(k: &ThresholdKeySet, signers: &[u32], digest: HashDigest) -> Vec<Signature> {
        signers
            .iter()
            .map(|s| k.sign(NodeId(*s), digest).unwrap())
            .collect()
    }

    #[test]
    fn signing_is_deterministic_and_unique_per_signer() {
        let k = keys(4);
        let d = hash_bytes(b"m");
        let s1 = k.sign(NodeId(0), d).unwrap();
        let s2 = k.sign(NodeId(0), d).unwrap();
        assert_eq!(s1, s2);
        assert!(k.verify(&s1));
        assert_ne!(s1.proof, k.sign(NodeId(1), d).unwrap().proof);
        assert_ne!(s1.proof, k.sign(NodeId(2), d).unwrap().proof);
    }

    #[test]
    fn verify_rejects_wrong_digest() {
        let k = keys(4);
        let mut s = k.sign(NodeId(0), hash_bytes(b"m")).unwrap();
        s.digest = hash_bytes(b"other");
        assert!(!k.verify(&s));
    }

    #[test]
    fn non_member_has_no_key() {
        let k = keys(4);
        assert_eq!(
            k.sign(NodeId(9), hash_bytes(b"m")).unwrap_err(),
            CryptoError::NoKey(NodeId(9))
        );
    }

    #[test]
    fn combine_requires_quorum() {
        let k = keys(4); // t = 2, quorum 3
        let d = hash_bytes(b"m");
        let ts = k.combine_threshold(&shares(&k, &[0, 1, 2], d)).unwrap();
        assert!(k.verify_threshold(&ts, &d));
        assert!(!k.verify_threshold(&ts, &hash_bytes(b"other")));

        assert!(matches!(
            k.combine_threshold(&shares(&k, &[0, 1], d)),
            Err(CryptoError::InsufficientShares { got: 2, need: 3 })
        ));
        // Duplicates do not count twice.
        assert!(matches!(
            k.combine_threshold(&shares(&k, &[0, 1, 1, 0], d)),
            Err(CryptoError::InsufficientShares { .. })
        ));
    }

    #[test]
    fn mixed_digests_rejected() {
        let k = keys(4);
        let mut sh = shares(&k, &[0, 1], hash_bytes(b"m"));
        sh.push(k.sign(NodeId(2), hash_bytes(b"other")).unwrap());
        assert_eq!(
            k.combine_threshold(&sh).unwrap_err(),
            CryptoError::MixedDigests
        );
    }

    #[test]
    fn failed_dkg_blocks_aggregation() {
        let set = ParticipantSet::genesis(4, 1);
        let k = ThresholdKeySet::generate(&set, hash_bytes(b"bad"), false);
        let d = hash_bytes(b"m");
        // Individual signatures still work in fallback mode.
        let sh = shares(&k, &[0, 1, 2], d);
        assert!(sh.iter().all(|s| k.verify(s)));
        assert_eq!(k.combine_threshold(&sh).unwrap_err(), CryptoError::DkgFailed);
    }

    #[test]
    fn forged_threshold_signatures_rejected() {
        let k = keys(7); // t = 4
        let d = hash_bytes(b"target");
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let mut proof = [0u8; 32];
            rng.fill(&mut proof);
            let forged = ThresholdSignature {
                digest: d,
                epoch: k.epoch,
                proof: HashDigest(proof),
            };
            assert!(!k.verify_threshold(&forged, &d));
        }
        // Rebinding a genuine aggregate to a different digest also fails.
        let genuine = k
            .combine_threshold(&shares(&k, &[0, 1, 2, 3, 4], d))
            .unwrap();
        let other = hash_bytes(b"other");
        let rebound = ThresholdSignature {
            digest: other,
            ..genuine.clone()
        };
        assert!(!k.verify_threshold(&rebound, &other));
        assert!(!k.verify_threshold(&genuine, &other));
    }

    #[test]
    fn threshold_signature_size_constant_across_n() {
        let sizes: Vec<usize> = [4u32, 16, 64, 256]
            .iter()
            .map(|&n| {
                let k = keys(n);
                let d = hash_bytes(b"m");
                let signers: Vec<u32> = (0..(k.t as u32 + 1)).collect();
                let ts = k.combine_threshold(&shares(&k, &signers, d)).unwrap();
                ts.encoded_len()
            })
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] == w[1]), "sizes: {sizes:?}");
    }

    #[test]
    fn vrf_is_deterministic_and_tag_sensitive() {
        let k = keys(4);
        let d = hash_bytes(b"m");
        let ts = k.combine_threshold(&shares(&k, &[0, 1, 2], d)).unwrap();
        assert_eq!(vrf_output(&ts, 1), vrf_output(&ts, 1));
        assert_ne!(vrf_output(&ts, 1), vrf_output(&ts, 2));
    }

    #[test]
    fn vrf_uniformity_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let n = 7u64;
        let samples = 10_000u64;
        let mut counts = [0u64; 7];
        let mut seed = hash_bytes(b"chain-genesis");
        for height in 0..samples {
            seed = vrf_from_seed(&seed, height);
            counts[(seed.as_u64() % n) as usize] += 1;
        }
        let expected = samples as f64 / n as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let crit = ChiSquared::new((n - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(stat < crit, "chi-square {stat:.2} >= critical {crit:.2}");
    }

    #[test]
    fn dkg_outcomes_and_cost() {
        let set = ParticipantSet::genesis(16, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert!(run_dkg(&set, 0.0, 1, &mut rng).keys.valid);
            assert!(!run_dkg(&set, 1.0, 1, &mut rng).keys.valid);
        }
        let run = run_dkg(&set, 0.0, 1, &mut rng);
        assert_eq!(run.cost_units, 16 * 4 * 4 * 4);
        assert_eq!(dkg_cost_units(1, 3), 0);
        assert_eq!(dkg_cost_units(7, 1), 7 * 27);
    }

    #[test]
    fn multi_signature_covers_listed_signers() {
        let k = keys(4);
        let d = hash_bytes(b"m");
        let all = k.combine_multi(&shares(&k, &[0, 1, 2, 3], d)).unwrap();
        assert_eq!(all.signers.len(), 4);
        assert!(k.verify_multi(&all, &d));

        // A 3-of-4 multisig verifies as such; rejecting it is the speculative
        // path's job, which requires the full bitmap.
        let partial = k.combine_multi(&shares(&k, &[0, 1, 3], d)).unwrap();
        assert_eq!(partial.signers.len(), 3);
        assert!(k.verify_multi(&partial, &d));

        assert_eq!(k.combine_multi(&[]).unwrap_err(), CryptoError::EmptyShares);
    }

    #[test]
    fn multi_signature_merge_matches_flat_combine() {
        let k = keys(8);
        let d = hash_bytes(b"m");
        let left = k.combine_multi(&shares(&k, &[0, 1, 2], d)).unwrap();
        let right = k.combine_multi(&shares(&k, &[3, 4, 5, 6, 7], d)).unwrap();
        let merged = k.merge_multi(&left, &right).unwrap();
        let flat = k
            .combine_multi(&shares(&k, &[0, 1, 2, 3, 4, 5, 6, 7], d))
            .unwrap();
        assert_eq!(merged, flat);
        assert!(k.verify_multi(&merged, &d));
        assert_eq!(
            k.merge_multi(&left, &left).unwrap_err(),
            CryptoError::OverlappingSigners(NodeId(0))
        );
    }

    #[test]
    fn rerun_with_fresh_instance_changes_keys() {
        let set = ParticipantSet::genesis(4, 1);
        let a = ThresholdKeySet::generate(&set, hash_bytes(b"first"), true);
        let b = ThresholdKeySet::generate(&set, hash_bytes(b"second"), true);
        assert_ne!(a.group_public, b.group_public);
        let d = hash_bytes(b"m");
        assert_ne!(
            a.sign(NodeId(0), d).unwrap().proof,
            b.sign(NodeId(0), d).unwrap().proof
        );
    }

    mod unforgeability {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// No adversary call sequence that lacks t+1 distinct members'
            /// shares yields a threshold signature that verifies.
            #[test]
            fn no_subquorum_forgery(
                seed in any::<u64>(),
                corrupt in proptest::collection::btree_set(0u32..7, 0..=4),
            ) {
                let k = keys(7); // t = 4: corruption of up to 4 < t+1
                let d = hash_bytes(b"victim");
                let mut rng = ChaCha20Rng::seed_from_u64(seed);

                // The adversary holds shares only from its corrupted nodes.
                let sh: Vec<Signature> = corrupt
                    .iter()
                    .map(|s| k.sign(NodeId(*s), d).unwrap())
                    .collect();
                prop_assert!(k.combine_threshold(&sh).is_err());

                // Mutated shares do not help: they fail verification and so
                // never count toward the quorum.
                let mut mutated = sh.clone();
                for s in &mut mutated {
                    let mut bytes = *s.proof.as_bytes();
                    let idx = rand::Rng::gen::<u8>(&mut rng) % 32;
                    bytes[idx as usize] ^= 1 + (rand::Rng::gen::<u8>(&mut rng) % 255);
                    s.proof = HashDigest(bytes);
                    s.signer = NodeId(rand::Rng::gen::<u32>(&mut rng) % 7);
                }
                let mut pool = sh;
                pool.extend(mutated);
                if let Ok(ts) = k.combine_threshold(&pool) {
                    // Combining may only succeed with t+1 genuine signers.
                    prop_assert!(k.verify_threshold(&ts, &d));
                    prop_assert!(corrupt.len() > k.t);
                }

                // Guessing proofs outright fails.
                let mut guess = [0u8; 32];
                rand::Rng::fill(&mut rng, &mut guess);
                let forged = ThresholdSignature { digest: d, epoch: k.epoch, proof: HashDigest(guess) };
                prop_assert!(!k.verify_threshold(&forged, &d));
            }
        }
    }
}
