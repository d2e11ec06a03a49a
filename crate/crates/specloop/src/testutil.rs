//! Shared fixtures for in-crate unit tests: hand-crafted models whose
//! behaviour is known in closed form, plus random-structure generators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{DraftTree, TreeMask, TreeNode};
use crate::model::{DraftParams, TargetModel};

/// Target whose argmax is always `(prev1 + 1) % vocab` — an additively
/// representable rule, so a crafted linear drafter can match it exactly.
pub(crate) fn successor_model(vocab: usize) -> TargetModel {
    let mut table = vec![0.0; vocab * vocab * vocab];
    for a in 0..vocab {
        for b in 0..vocab {
            let off = (a * vocab + b) * vocab;
            let next = (b + 1) % vocab;
            for t in 0..vocab {
                table[off + t] = if t == next { 0.7 } else { 0.3 / (vocab - 1) as f64 };
            }
        }
    }
    TargetModel::from_parts(vocab, 2, 1, table, vec![0.0; 2 * 2 * vocab]).unwrap()
}

/// Drafter whose argmax is `(prev1 + shift) % vocab`.
pub(crate) fn shift_drafter(vocab: usize, shift: usize) -> DraftParams {
    let mut d = DraftParams::zeros(vocab, 2, false);
    let feat = d.feature_dim();
    for b in 0..vocab {
        let t = (b + shift) % vocab;
        d.weight_mut()[t * feat + vocab + b] = 8.0;
    }
    d
}

/// Random topologically ordered tree (parents always precede children).
pub(crate) fn random_tree(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> DraftTree {
    let mut nodes: Vec<TreeNode> = Vec::with_capacity(n);
    for i in 0..n {
        let parent = if i == 0 || rng.random_bool(0.25) {
            None
        } else {
            Some(rng.random_range(0..i))
        };
        let depth = parent.map_or(1, |p| nodes[p].depth + 1);
        nodes.push(TreeNode {
            token: rng.random_range(0..vocab),
            parent,
            depth,
            draft_prob: rng.random::<f64>(),
        });
    }
    DraftTree { context: (0, 1), gamma: 64, branching: 64, nodes }
}

/// Oracle: position j is visible from node i iff j is reached by walking
/// i's parent chain (or j is a prefix position, or j == i).
pub(crate) fn assert_mask_matches_oracle(tree: &DraftTree, prefix: usize, mask: &TreeMask) {
    let n = tree.nodes.len();
    for i in 0..prefix + n {
        for j in 0..prefix + n {
            let expect = if i < prefix {
                j <= i
            } else if j < prefix {
                true
            } else {
                let (ni, nj) = (i - prefix, j - prefix);
                let mut reachable = false;
                let mut cur = Some(ni);
                while let Some(c) = cur {
                    if c == nj {
                        reachable = true;
                        break;
                    }
                    cur = tree.nodes[c].parent;
                }
                reachable
            };
            assert_eq!(mask.allowed(i, j), expect, "mask mismatch at ({i},{j})");
        }
    }
}
