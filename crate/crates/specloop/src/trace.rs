//! Serving-side trace records and the bounded buffer that feeds the learner.
//!
//! Every verification step produces one [`TraceRecord`] carrying everything
//! the learner needs to recompute drafter logits *without* replaying the
//! target model: the committed context, the proposal tree, per-position
//! target distributions (dense or top-K compressed), optional hidden
//! features, and the drafter version that produced the proposals.
//!
//! Target payloads are indexed by *position*: entry 0 is the root position
//! (the distribution that judged the first proposal) and entry `1 + i` is
//! the distribution after tree node `i`.
//!
//! The [`TraceBuffer`] is a bounded FIFO ring: producers append (dropping
//! the oldest record when full), the learner fetches fixed-size batches, and
//! the counters always satisfy `appended == fetched + len + dropped`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::engine::{DraftTree, StepOutcome};
use crate::error::{Error, Result};
use crate::model::{top_k_of, TargetModel};

/// Version of the record layout; appends with any other version are rejected.
pub const SCHEMA_VERSION: u32 = 1;

/// Top-K compressed probability vector: kept entries plus the leftover mass,
/// which decompression spreads uniformly over the unkept complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedDist {
    pub indices: Vec<u32>,
    pub probs: Vec<f64>,
    pub residual: f64,
}

/// Per-position target distributions for one verification step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetPayload {
    Dense(Vec<Vec<f64>>),
    TopK(Vec<CompressedDist>),
}

impl TargetPayload {
    pub fn positions(&self) -> usize {
        match self {
            TargetPayload::Dense(d) => d.len(),
            TargetPayload::TopK(c) => c.len(),
        }
    }
}

/// One verification step's worth of training signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub request_id: u64,
    pub step_index: u32,
    /// The two committed tokens before the tree root.
    pub context: (u32, u32),
    pub tree: DraftTree,
    /// Aligned with `tree.nodes`; true for accepted-path nodes.
    pub accepted_flags: Vec<bool>,
    pub bonus_token: u32,
    /// Position-indexed target distributions (0 = root position).
    pub target_payload: TargetPayload,
    /// Position-indexed hidden features; present iff the drafter conditions
    /// on them.
    pub hidden_features: Option<Vec<Vec<f64>>>,
    pub drafter_version: u64,
    pub schema_version: u32,
}

/// Compress a dense distribution: optionally project onto a draft-vocabulary
/// subset (renormalizing), then keep the top `k` entries by probability (the
/// argmax is always kept) and record the residual mass. `k` of zero or at
/// least the support size stores every in-support entry with zero residual.
pub fn compress_dist(dense: &[f64], k: usize, draft_vocab: Option<&[u32]>) -> Result<CompressedDist> {
    let (domain, probs): (Vec<u32>, Vec<f64>) = match draft_vocab {
        None => ((0..dense.len() as u32).collect(), dense.to_vec()),
        Some(sub) => {
            if sub.is_empty() {
                return Err(Error::InvalidArgument("draft vocabulary subset is empty".into()));
            }
            for &t in sub {
                if t as usize >= dense.len() {
                    return Err(Error::TokenOutOfRange { token: t, vocab: dense.len() });
                }
            }
            let raw: Vec<f64> = sub.iter().map(|&t| dense[t as usize]).collect();
            let mass: f64 = raw.iter().sum();
            if !(mass > 0.0) {
                return Err(Error::InvalidArgument(
                    "target distribution has no mass on the draft vocabulary".into(),
                ));
            }
            (sub.to_vec(), raw.iter().map(|p| p / mass).collect())
        }
    };

    let keep = if k == 0 { domain.len() } else { k.min(domain.len()) };
    let top = top_k_of(&probs, keep);
    let mut indices = Vec::with_capacity(keep);
    let mut kept = Vec::with_capacity(keep);
    let mut kept_mass = 0.0;
    for (pos, p) in top {
        indices.push(domain[pos as usize]);
        kept.push(p);
        kept_mass += p;
    }
    let residual = if keep == domain.len() { 0.0 } else { (1.0 - kept_mass).max(0.0) };
    Ok(CompressedDist { indices, probs: kept, residual })
}

/// Invert [`compress_dist`] into a dense vector over the full vocabulary.
/// The residual is spread uniformly over the unkept part of the domain;
/// tokens outside the draft vocabulary get zero.
pub fn decompress_dist(
    c: &CompressedDist,
    vocab: usize,
    draft_vocab: Option<&[u32]>,
) -> Result<Vec<f64>> {
    if c.indices.len() != c.probs.len() {
        return Err(Error::DimensionMismatch { expected: c.indices.len(), got: c.probs.len() });
    }
    let mut dense = vec![0.0; vocab];
    let mut in_domain = vec![false; vocab];
    let domain_size = match draft_vocab {
        None => {
            in_domain.iter_mut().for_each(|d| *d = true);
            vocab
        }
        Some(sub) => {
            for &t in sub {
                if t as usize >= vocab {
                    return Err(Error::TokenOutOfRange { token: t, vocab });
                }
                in_domain[t as usize] = true;
            }
            sub.len()
        }
    };
    let mut kept = vec![false; vocab];
    for (&i, &p) in c.indices.iter().zip(c.probs.iter()) {
        if i as usize >= vocab || !in_domain[i as usize] {
            return Err(Error::TokenOutOfRange { token: i, vocab });
        }
        dense[i as usize] = p;
        kept[i as usize] = true;
    }
    let complement = domain_size - c.indices.len();
    if complement > 0 && c.residual > 0.0 {
        let share = c.residual / complement as f64;
        for t in 0..vocab {
            if in_domain[t] && !kept[t] {
                dense[t] = share;
            }
        }
    }
    Ok(dense)
}

/// Build the trace record for one verification step.
#[allow(clippy::too_many_arguments)]
pub fn build_trace_record(
    request_id: u64,
    step_index: u32,
    step: &StepOutcome,
    drafter_version: u64,
    compress_top_k: usize,
    draft_vocab: Option<&[u32]>,
    include_hidden: bool,
    model: &TargetModel,
) -> Result<TraceRecord> {
    let tree = &step.tree;
    let verify = &step.verify;
    let mut dense: Vec<&[f64]> = Vec::with_capacity(tree.nodes.len() + 1);
    dense.push(&verify.root_dist);
    for d in &verify.target_dists {
        dense.push(d);
    }

    let target_payload = if compress_top_k > 0 || draft_vocab.is_some() {
        let mut comp = Vec::with_capacity(dense.len());
        for d in &dense {
            comp.push(compress_dist(d, compress_top_k, draft_vocab)?);
        }
        TargetPayload::TopK(comp)
    } else {
        TargetPayload::Dense(dense.iter().map(|d| d.to_vec()).collect())
    };

    let hidden_features = if include_hidden {
        let mut h = Vec::with_capacity(tree.nodes.len() + 1);
        h.push(model.hidden(tree.context.0, tree.context.1)?);
        for i in 0..tree.nodes.len() {
            let (p2, p1) = tree.context_after(Some(i));
            h.push(model.hidden(p2, p1)?);
        }
        Some(h)
    } else {
        None
    };

    Ok(TraceRecord {
        request_id,
        step_index,
        context: tree.context,
        tree: tree.clone(),
        accepted_flags: verify.accepted_flags(tree.nodes.len()),
        bonus_token: verify.bonus_token,
        target_payload,
        hidden_features,
        drafter_version,
        schema_version: SCHEMA_VERSION,
    })
}

/// Staleness of a record relative to the learner: how many optimizer steps
/// the producing drafter lags behind. Negative lag is an integrity error.
pub fn staleness(record_version: u64, learner_version: u64) -> Result<u64> {
    learner_version
        .checked_sub(record_version)
        .ok_or(Error::NegativeStaleness { learner: learner_version, record: record_version })
}

/// What happened to an append.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Stored,
    /// The buffer was full; the oldest record was evicted to make room.
    DroppedOldest,
}

/// Monotone producer/consumer counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BufferCounters {
    pub appended: u64,
    pub dropped: u64,
    pub fetched: u64,
}

/// Bounded FIFO ring of trace records with drop-oldest overflow.
#[derive(Debug)]
pub struct TraceBuffer {
    capacity: usize,
    items: VecDeque<(TraceRecord, f64)>,
    counters: BufferCounters,
}

impl TraceBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be >= 1".into()));
        }
        Ok(TraceBuffer { capacity, items: VecDeque::with_capacity(capacity), counters: BufferCounters::default() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn counters(&self) -> BufferCounters {
        self.counters
    }

    /// Append a record stamped with its simulated arrival time.
    pub fn append(&mut self, record: TraceRecord, arrived_at: f64) -> Result<AppendOutcome> {
        if record.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaMismatch { expected: SCHEMA_VERSION, got: record.schema_version });
        }
        let outcome = if self.items.len() == self.capacity {
            self.items.pop_front();
            self.counters.dropped += 1;
            AppendOutcome::DroppedOldest
        } else {
            AppendOutcome::Stored
        };
        self.items.push_back((record, arrived_at));
        self.counters.appended += 1;
        Ok(outcome)
    }

    /// Remove and return exactly `n` oldest records, or `None` when fewer
    /// are available (never a partial batch, never blocking).
    pub fn fetch_batch(&mut self, n: usize) -> Option<Vec<TraceRecord>> {
        if n == 0 || self.items.len() < n {
            return None;
        }
        self.counters.fetched += n as u64;
        Some(self.items.drain(..n).map(|(r, _)| r).collect())
    }

    /// Arrival stamp of the oldest buffered record.
    pub fn oldest_arrival(&self) -> Option<f64> {
        self.items.front().map(|&(_, t)| t)
    }
}
