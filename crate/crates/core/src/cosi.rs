//! Speculative fast path: balanced-tree aggregation of all-`n` multi-signatures.
//!
//! In the ordinary case every node signs, so there is no ambiguity on the
//! signers and a multi-signature replaces the threshold signature. Nodes are
//! organized into a balanced tree rooted at the round-1 leader; each internal
//! node aggregates its children's contributions, so a pass completes in a
//! logarithmic number of message delays while total volume stays linear. Any
//! missing or invalid child contribution makes the run fall back to the
//! collector path for the whole height, with no retry.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{MultiSignature, ThresholdKeySet};
use crate::types::{HashDigest, NodeId, ParticipantSet};

/// A balanced aggregation tree spanning all n nodes exactly once.
#[derive(Clone, Debug)]
pub struct AggregationTree {
    pub root: NodeId,
    pub fanout: usize,
    pub depth: usize,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    parents: BTreeMap<NodeId, NodeId>,
    /// Level-order layout; index 0 is the root.
    order: Vec<NodeId>,
}

impl AggregationTree {
    /// Build the tree for a height: rooted at the round's leader, remaining
    /// nodes placed in seed-shuffled breadth-first order. Deterministic across
    /// replicas given the same seed.
    pub fn build(
        set: &ParticipantSet,
        fanout: usize,
        seed: &HashDigest,
        root: NodeId,
    ) -> AggregationTree {
        assert!(fanout >= 2, "fanout must be at least 2");
        let mut rest: Vec<NodeId> = set.members.iter().copied().filter(|m| *m != root).collect();
        let mut rng = ChaCha20Rng::from_seed(*crate::crypto::vrf_from_seed(seed, 0xc051).as_bytes());
        rest.shuffle(&mut rng);

        let mut order = Vec::with_capacity(set.n());
        order.push(root);
        order.extend(rest);

        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        let mut parents = BTreeMap::new();
        for (i, node) in order.iter().enumerate().skip(1) {
            let parent = order[(i - 1) / fanout];
            children.entry(parent).or_default().push(*node);
            parents.insert(*node, parent);
        }
        let depth = Self::level_of(order.len().saturating_sub(1), fanout);
        AggregationTree {
            root,
            fanout,
            depth,
            children,
            parents,
            order,
        }
    }

    /// Level of the node at `index` in level order (root = level 0).
    fn level_of(index: usize, fanout: usize) -> usize {
        let mut level = 0;
        let mut i = index;
        while i > 0 {
            i = (i - 1) / fanout;
            level += 1;
        }
        level
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        self.children.get(&node).cloned().unwrap_or_default()
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parents.get(&node).copied()
    }

    /// Height of the subtree rooted at `node`: 0 for a leaf.
    pub fn subtree_height(&self, node: NodeId) -> usize {
        self.children(node)
            .into_iter()
            .map(|c| 1 + self.subtree_height(c))
            .max()
            .unwrap_or(0)
    }

    /// All nodes in the subtree rooted at `node`, itself included.
    pub fn subtree_members(&self, node: NodeId) -> Vec<NodeId> {
        let mut acc = vec![node];
        let mut stack = self.children(node);
        while let Some(next) = stack.pop() {
            acc.push(next);
            stack.extend(self.children(next));
        }
        acc
    }

    /// Every node in level order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.order
    }
}

/// Closed-form outcome of one aggregation pass, used as an oracle against the
/// event-driven execution: which aggregate the root ends up with, who reports
/// the fault otherwise, and the transmission/time budget of the pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PassOutcome {
    Success(MultiSignature),
    Fallback { reporter: NodeId },
}

/// Predict one tree pass given the set of nodes that actually contribute.
/// A responsive internal node with an unresponsive descendant reports the
/// fault; the first such report (deepest-first) wins.
pub fn speculative_round(
    tree: &AggregationTree,
    digest: &HashDigest,
    keys: &ThresholdKeySet,
    responsive: &dyn Fn(NodeId) -> bool,
) -> PassOutcome {
    // Walk leaves-up: find the shallowest responsive ancestor of any failure.
    for node in tree.nodes().iter().rev() {
        if !responsive(*node) {
            let mut reporter = tree.parent(*node);
            while let Some(r) = reporter {
                if responsive(r) {
                    return PassOutcome::Fallback { reporter: r };
                }
                reporter = tree.parent(r);
            }
            // Unresponsive all the way to the root: the root's own silence is
            // a leader failure, surfaced by round timers rather than a report.
            return PassOutcome::Fallback { reporter: tree.root };
        }
    }
    let shares: Vec<_> = tree
        .nodes()
        .iter()
        .map(|n| keys.sign(*n, *digest).expect("member key"))
        .collect();
    PassOutcome::Success(keys.combine_multi(&shares).expect("all shares valid"))
}

/// Transmission budget of one full speculative height: one up-pass and one
/// down-pass per aggregation plus the final broadcast, each n-1 constant-size
/// messages. The initial block distribution is body traffic, reported
/// separately.
pub fn speculative_volume_bound(n: usize) -> u64 {
    4 * (n as u64 - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{hash_bytes, ThresholdKeySet};

    fn tree(n: u32, fanout: usize) -> AggregationTree {
        let set = ParticipantSet::genesis(n, 1);
        AggregationTree::build(&set, fanout, &hash_bytes(b"seed"), NodeId(0))
    }

    #[test]
    fn single_node_tree_is_root_only() {
        let t = tree(1, 2);
        assert_eq!(t.depth, 0);
        assert_eq!(t.nodes(), &[NodeId(0)]);
        assert!(t.children(NodeId(0)).is_empty());
    }

    #[test]
    fn seven_nodes_make_a_complete_binary_tree() {
        let t = tree(7, 2);
        assert_eq!(t.depth, 2);
        let mut seen: Vec<NodeId> = t.nodes().to_vec();
        seen.sort();
        assert_eq!(seen, (0..7).map(NodeId).collect::<Vec<_>>());
        // Every non-root node has exactly one parent and the edge count is n-1.
        let edge_count: usize = t.nodes().iter().map(|n| t.children(*n).len()).sum();
        assert_eq!(edge_count, 6);
    }

    #[test]
    fn depth_matches_construction_oracle() {
        for (n, expect) in [(2u32, 1usize), (3, 1), (4, 2), (16, 4), (64, 6), (256, 8)] {
            let t = tree(n, 2);
            assert_eq!(t.depth, expect, "depth for n={n}");
            // Never worse than the ceil(log2 n) bound plus the complete-tree
            // slack of one level.
            assert!(t.depth <= crate::crypto::ceil_log2(n as usize) as usize + 1);
        }
    }

    #[test]
    fn construction_is_deterministic_and_root_respected() {
        let set = ParticipantSet::genesis(16, 1);
        let s = hash_bytes(b"x");
        let a = AggregationTree::build(&set, 2, &s, NodeId(5));
        let b = AggregationTree::build(&set, 2, &s, NodeId(5));
        assert_eq!(a.nodes(), b.nodes());
        assert_eq!(a.root, NodeId(5));
        assert_eq!(a.nodes()[0], NodeId(5));
        // A different seed shuffles the interior.
        let c = AggregationTree::build(&set, 2, &hash_bytes(b"y"), NodeId(5));
        assert_ne!(a.nodes(), c.nodes());
    }

    #[test]
    fn subtree_members_partition_the_tree() {
        let t = tree(16, 2);
        let all = t.subtree_members(t.root);
        assert_eq!(all.len(), 16);
        for child in t.children(t.root) {
            let sub = t.subtree_members(child);
            assert!(sub.iter().all(|m| all.contains(m)));
            assert!(!sub.contains(&t.root));
        }
    }

    #[test]
    fn pass_oracle_success_and_fault_attribution() {
        let set = ParticipantSet::genesis(7, 1);
        let keys = ThresholdKeySet::generate(&set, hash_bytes(b"inst"), true);
        let t = AggregationTree::build(&set, 2, &hash_bytes(b"seed"), NodeId(0));
        let d = hash_bytes(b"payload");

        let all = speculative_round(&t, &d, &keys, &|_| true);
        match all {
            PassOutcome::Success(ms) => {
                assert_eq!(ms.signers.len(), 7);
                assert!(keys.verify_multi(&ms, &d));
            }
            PassOutcome::Fallback { .. } => panic!("all-honest pass must succeed"),
        }

        // A silent leaf is reported by its parent.
        let leaf = *t.nodes().last().unwrap();
        let parent = t.parent(leaf).unwrap();
        let outcome = speculative_round(&t, &d, &keys, &|n| n != leaf);
        assert_eq!(outcome, PassOutcome::Fallback { reporter: parent });
    }
}
