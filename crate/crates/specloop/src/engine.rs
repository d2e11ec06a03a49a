//! Speculative decoding engine: token-tree proposal, tree attention masks,
//! greedy verification, and the combined propose/verify decode loop.
//!
//! Acceptance is greedy and therefore lossless: a proposed node is accepted
//! iff its token equals the target model's argmax at the node's parent
//! position, and the verifier always appends the target argmax after the
//! accepted prefix as a bonus token. The emitted sequence is consequently
//! identical to plain greedy decoding of the target model, no matter what
//! the drafter proposes — drafter quality only changes *how fast* tokens are
//! committed, never *which* tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, DraftParams, TargetModel};

/// One node of a proposal tree. Nodes are stored in topological order:
/// a parent always precedes its children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub token: u32,
    /// Index of the parent node, or `None` for children of the (virtual)
    /// root at the end of the committed context.
    pub parent: Option<usize>,
    /// Depth starting at 1 for root children.
    pub depth: usize,
    /// Drafter probability of `token` conditioned on the node's path.
    pub draft_prob: f64,
}

/// A drafter proposal: a token tree rooted at the end of `context`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftTree {
    /// The two committed tokens immediately before the root position.
    pub context: (u32, u32),
    pub gamma: usize,
    pub branching: usize,
    pub nodes: Vec<TreeNode>,
}

/// Proposal shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Maximum tree depth (chain length when `branching == 1`).
    pub gamma: usize,
    /// Children added per expanded node.
    pub branching: usize,
    /// Hard cap on total tree nodes.
    pub max_nodes: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { gamma: 5, branching: 1, max_nodes: 64 }
    }
}

impl EngineConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::InvalidArgument("gamma must be >= 1".into()));
        }
        if self.branching == 0 || self.branching > vocab {
            return Err(Error::InvalidArgument(format!(
                "branching must be in 1..={vocab}"
            )));
        }
        if self.max_nodes < self.gamma {
            return Err(Error::InvalidArgument(
                "max_nodes must be >= gamma (room for one full chain)".into(),
            ));
        }
        Ok(())
    }
}

impl DraftTree {
    /// Structural validation: topological parents, consistent depths,
    /// in-range tokens.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if (n.token as usize) >= vocab {
                return Err(Error::TokenOutOfRange { token: n.token, vocab });
            }
            match n.parent {
                None => {
                    if n.depth != 1 {
                        return Err(Error::MalformedTree(format!(
                            "node {i} has no parent but depth {}",
                            n.depth
                        )));
                    }
                }
                Some(p) => {
                    if p >= i {
                        return Err(Error::MalformedTree(format!(
                            "node {i} references parent {p} at or after itself"
                        )));
                    }
                    if n.depth != self.nodes[p].depth + 1 {
                        return Err(Error::MalformedTree(format!(
                            "node {i} depth {} inconsistent with parent depth {}",
                            n.depth, self.nodes[p].depth
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// `(prev2, prev1)` for the position *after* node `node` (or after the
    /// committed context when `node` is `None`). This is the only way any
    /// consumer derives per-node contexts, which is exactly the tree-mask
    /// rule: a node sees its ancestors and the prefix, nothing else.
    pub fn context_after(&self, node: Option<usize>) -> (u32, u32) {
        match node {
            None => self.context,
            Some(i) => {
                let n = &self.nodes[i];
                let prev2 = match n.parent {
                    None => self.context.1,
                    Some(p) => self.nodes[p].token,
                };
                (prev2, n.token)
            }
        }
    }

    /// Root-to-node path as node indices (inclusive of `i`).
    pub fn path_to(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }
}

/// Build a proposal tree by breadth-limited expansion: at each depth the
/// frontier is expanded in order of descending cumulative draft probability
/// (ties to the lower node index), each expansion adding the drafter's
/// top-`branching` children, until depth `gamma` or `max_nodes` is hit.
/// With `branching == 1` this degenerates to a greedy chain of length
/// `gamma`.
pub fn propose_tree(
    drafter: &DraftParams,
    model: &TargetModel,
    context: (u32, u32),
    cfg: &EngineConfig,
) -> Result<DraftTree> {
    cfg.validate(drafter.vocab_size())?;
    if drafter.vocab_size() != model.vocab_size() {
        return Err(Error::DimensionMismatch {
            expected: model.vocab_size(),
            got: drafter.vocab_size(),
        });
    }

    let mut tree = DraftTree {
        context,
        gamma: cfg.gamma,
        branching: cfg.branching,
        nodes: Vec::new(),
    };
    // Frontier entries: (parent node, cumulative path probability).
    let mut frontier: Vec<(Option<usize>, f64)> = vec![(None, 1.0)];
    'depths: for depth in 1..=cfg.gamma {
        // Highest-probability frontier first; ties to the earlier node.
        frontier.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut next = Vec::new();
        for (parent, path_prob) in frontier {
            if tree.nodes.len() >= cfg.max_nodes {
                break 'depths;
            }
            let (prev2, prev1) = tree.context_after(parent);
            let hidden = if drafter.use_hidden() {
                Some(model.hidden(prev2, prev1)?)
            } else {
                None
            };
            let proposals = drafter.top_k(prev2, prev1, hidden.as_deref(), cfg.branching)?;
            for (token, prob) in proposals {
                if tree.nodes.len() >= cfg.max_nodes {
                    break 'depths;
                }
                tree.nodes.push(TreeNode { token, parent, depth, draft_prob: prob });
                next.push((Some(tree.nodes.len() - 1), path_prob * prob));
            }
        }
        frontier = next;
    }
    Ok(tree)
}

/// Boolean attention mask over `prefix_len` committed positions followed by
/// the tree's nodes. Position `i` may attend to `j` iff:
/// prefix rows are lower-triangular among themselves, and every node row
/// sees the whole prefix, itself, and exactly its ancestors.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMask {
    pub prefix_len: usize,
    pub size: usize,
    bits: Vec<bool>,
}

impl TreeMask {
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }
}

/// Build the attention mask for `tree` behind a committed prefix.
pub fn build_tree_mask(tree: &DraftTree, prefix_len: usize, vocab: usize) -> Result<TreeMask> {
    tree.validate(vocab)?;
    let n = tree.nodes.len();
    let size = prefix_len + n;
    let mut bits = vec![false; size * size];
    for i in 0..prefix_len {
        for j in 0..=i {
            bits[i * size + j] = true;
        }
    }
    for (ni, _) in tree.nodes.iter().enumerate() {
        let row = prefix_len + ni;
        for j in 0..prefix_len {
            bits[row * size + j] = true;
        }
        // Self plus ancestor chain.
        let mut cur = Some(ni);
        while let Some(c) = cur {
            bits[row * size + prefix_len + c] = true;
            cur = tree.nodes[c].parent;
        }
    }
    Ok(TreeMask { prefix_len, size, bits })
}

/// Outcome of verifying one proposal tree against the target model.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyResult {
    /// Target distribution at the root position (conditioned on the context
    /// alone) — the position that decides the first accepted token.
    pub root_dist: Vec<f64>,
    /// Per-node target distribution conditioned on context ⊕ path(node),
    /// i.e. the distribution *after* that node's token.
    pub target_dists: Vec<Vec<f64>>,
    /// Accepted root-to-leaf node indices, in depth order.
    pub accepted_path: Vec<usize>,
    /// Target argmax after the accepted path (always emitted).
    pub bonus_token: u32,
    /// `accepted_path.len() + 1` (bonus token included).
    pub accept_len: usize,
    /// All node indices not on the accepted path.
    pub rejected_nodes: Vec<usize>,
}

impl VerifyResult {
    /// Per-node accepted flags aligned with the tree's node list.
    pub fn accepted_flags(&self, n_nodes: usize) -> Vec<bool> {
        let mut flags = vec![false; n_nodes];
        for &i in &self.accepted_path {
            flags[i] = true;
        }
        flags
    }
}

/// Verify a tree: compute the target distribution at every node position,
/// walk from the root accepting a child iff its token equals the target
/// argmax at its parent's position, and emit the bonus token.
pub fn verify_tree(model: &TargetModel, tree: &DraftTree) -> Result<VerifyResult> {
    tree.validate(model.vocab_size())?;
    let root_dist = model.next_dist(tree.context.0, tree.context.1)?.to_vec();
    let mut target_dists = Vec::with_capacity(tree.nodes.len());
    for i in 0..tree.nodes.len() {
        let (p2, p1) = tree.context_after(Some(i));
        target_dists.push(model.next_dist(p2, p1)?.to_vec());
    }

    let mut accepted_path = Vec::new();
    let mut parent: Option<usize> = None;
    let mut dist: &[f64] = &root_dist;
    loop {
        let want = argmax(dist) as u32;
        // At most one child can match: sibling tokens are distinct.
        let child = tree
            .nodes
            .iter()
            .position(|n| n.parent == parent && n.token == want);
        match child {
            Some(c) => {
                accepted_path.push(c);
                dist = &target_dists[c];
                parent = Some(c);
            }
            None => break,
        }
    }
    let bonus_token = argmax(dist) as u32;
    let accept_len = accepted_path.len() + 1;
    let accepted: std::collections::HashSet<usize> = accepted_path.iter().copied().collect();
    let rejected_nodes = (0..tree.nodes.len()).filter(|i| !accepted.contains(i)).collect();
    Ok(VerifyResult {
        root_dist,
        target_dists,
        accepted_path,
        bonus_token,
        accept_len,
        rejected_nodes,
    })
}

/// One propose/verify round.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub tree: DraftTree,
    pub verify: VerifyResult,
}

/// Full speculative decode of one request.
#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    /// Emitted tokens (exactly `max_output` unless `max_output == 0`).
    pub tokens: Vec<u32>,
    pub steps: Vec<StepOutcome>,
}

/// Greedy (argmax) decode of the target model — the reference output that
/// speculative decoding must reproduce exactly.
pub fn greedy_decode(model: &TargetModel, prompt: &[u32], max_output: usize) -> Result<Vec<u32>> {
    if prompt.len() < 2 {
        return Err(Error::PromptTooShort(prompt.len()));
    }
    let mut prev2 = prompt[prompt.len() - 2];
    let mut prev1 = prompt[prompt.len() - 1];
    let mut out = Vec::with_capacity(max_output);
    for _ in 0..max_output {
        let t = model.argmax_next(prev2, prev1)?;
        out.push(t);
        prev2 = prev1;
        prev1 = t;
    }
    Ok(out)
}

/// Repeatedly propose and verify until `max_output` tokens are committed.
/// Per step, the accepted-path tokens plus the bonus token are committed
/// (truncated at the output cap).
pub fn speculative_decode(
    model: &TargetModel,
    drafter: &DraftParams,
    prompt: &[u32],
    max_output: usize,
    cfg: &EngineConfig,
) -> Result<DecodeOutcome> {
    if prompt.len() < 2 {
        return Err(Error::PromptTooShort(prompt.len()));
    }
    for &t in prompt {
        if t as usize >= model.vocab_size() {
            return Err(Error::TokenOutOfRange { token: t, vocab: model.vocab_size() });
        }
    }
    let mut context = (prompt[prompt.len() - 2], prompt[prompt.len() - 1]);
    let mut tokens = Vec::with_capacity(max_output);
    let mut steps = Vec::new();
    while tokens.len() < max_output {
        let tree = propose_tree(drafter, model, context, cfg)?;
        let verify = verify_tree(model, &tree)?;
        for &ni in &verify.accepted_path {
            if tokens.len() < max_output {
                tokens.push(tree.nodes[ni].token);
            }
        }
        if tokens.len() < max_output {
            tokens.push(verify.bonus_token);
        }
        context = match tokens.len() {
            0 => unreachable!("each step commits at least one token"),
            1 => (context.1, tokens[0]),
            n => (tokens[n - 2], tokens[n - 1]),
        };
        steps.push(StepOutcome { tree, verify });
    }
    Ok(DecodeOutcome { tokens, steps })
}
