//! The two toy language models the simulator runs on.
//!
//! * [`TargetModel`] — the "large" model being served: an order-2 Markov
//!   table over a small vocabulary. Each conditional row is generated from a
//!   seed with sparse structure: `sparsity` high-probability successors drawn
//!   from the domain block of the most recent token, and a small noise floor
//!   everywhere else. Because successors stay inside the domain block of
//!   `prev1`, greedy trajectories never leave the block their prompt started
//!   in — different traffic domains therefore exercise disjoint conditional
//!   rows. A seeded fraction of rows (`coherence`) give their argmax to a
//!   per-token "preferred" successor, which caps how predictable each domain
//!   is for a low-capacity drafter without making it trivially learnable.
//!
//! * [`DraftParams`] — the drafter: a linear-softmax model over concatenated
//!   one-hot encodings of the previous two tokens, optionally extended with a
//!   low-dimensional hidden feature vector projected by the target model.
//!   The drafter proposes the token trees that the target verifies, and is
//!   the only thing the online learner trains.
//!
//! All tie-breaking (argmax, top-k ordering) favors the lowest token index so
//! that every consumer of these models agrees bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before any logarithm so that
/// KL-style losses stay finite on sparse distributions.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax (max-subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Index of the maximum value; ties broken by lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `ln` with the probability floor applied first.
pub fn floored_ln(x: f64) -> f64 {
    x.max(PROB_FLOOR).ln()
}

/// Half-open token range owned by domain `d` when the vocabulary is
/// partitioned into `num_domains` nearly equal blocks.
pub fn domain_token_range(vocab: usize, num_domains: usize, d: usize) -> std::ops::Range<u32> {
    debug_assert!(d < num_domains);
    let start = (d * vocab).div_ceil(num_domains) as u32;
    let end = ((d + 1) * vocab).div_ceil(num_domains) as u32;
    start..end
}

/// Domain block that token `t` belongs to (inverse of [`domain_token_range`]).
pub fn domain_of_token(vocab: usize, num_domains: usize, t: u32) -> usize {
    t as usize * num_domains / vocab
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic per-(a, b) stream seed derived from a base seed.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(base ^ splitmix64(a.wrapping_mul(2).wrapping_add(1)) ^ splitmix64(b.wrapping_mul(0x5851_F42D_4C95_7F2D)))
}

/// Generation parameters for a [`TargetModel`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_domains: usize,
    /// High-probability successors per conditional row.
    pub sparsity: usize,
    /// Total probability mass spread (noisily) over non-successor tokens.
    pub noise: f64,
    /// Probability that a row's argmax is the preferred successor of `prev1`.
    pub coherence: f64,
    pub seed: u64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            vocab_size: 64,
            hidden_dim: 16,
            num_domains: 5,
            sparsity: 4,
            noise: 0.05,
            coherence: 0.75,
            seed: 7,
        }
    }
}

/// Order-2 Markov target model with a fixed hidden-feature projection.
#[derive(Debug, Clone)]
pub struct TargetModel {
    vocab: usize,
    hidden_dim: usize,
    num_domains: usize,
    /// `vocab^3` probabilities, row-major `[prev2][prev1][next]`.
    table: Vec<f64>,
    /// `hidden_dim x 2*vocab`, row-major; applied to concatenated one-hots.
    hidden_proj: Vec<f64>,
}

impl TargetModel {
    /// Deterministically generate a model from a seed. Each conditional row
    /// uses its own seeded stream, so single rows can be re-derived in
    /// isolation.
    pub fn generate(cfg: &TargetConfig) -> Result<Self> {
        let v = cfg.vocab_size;
        if v < 2 {
            return Err(Error::InvalidArgument("vocab_size must be >= 2".into()));
        }
        if cfg.num_domains == 0 || cfg.num_domains * 2 > v {
            return Err(Error::InvalidArgument(format!(
                "num_domains must be in 1..={} for vocab_size {v}",
                v / 2
            )));
        }
        let min_block = (0..cfg.num_domains)
            .map(|d| domain_token_range(v, cfg.num_domains, d).len())
            .min()
            .unwrap();
        if cfg.sparsity == 0 || cfg.sparsity > min_block {
            return Err(Error::InvalidArgument(format!(
                "sparsity must be in 1..={min_block} (smallest domain block)"
            )));
        }
        if !(0.0..1.0).contains(&cfg.noise) {
            return Err(Error::InvalidArgument("noise must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&cfg.coherence) {
            return Err(Error::InvalidArgument("coherence must be in [0, 1]".into()));
        }

        let preferred: Vec<u32> = (0..v as u32)
            .map(|b| preferred_successor(cfg, b))
            .collect();

        let mut table = vec![0.0; v * v * v];
        for a in 0..v as u32 {
            for b in 0..v as u32 {
                let row = &mut table[(a as usize * v + b as usize) * v..][..v];
                generate_row(cfg, a, b, preferred[b as usize], row);
            }
        }

        let mut proj_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x48_4944, 0x50_524F_4A));
        let hidden_proj: Vec<f64> = (0..cfg.hidden_dim * 2 * v)
            .map(|_| proj_rng.random::<f64>() * 2.0 - 1.0)
            .collect();

        Ok(TargetModel {
            vocab: v,
            hidden_dim: cfg.hidden_dim,
            num_domains: cfg.num_domains,
            table,
            hidden_proj,
        })
    }

    /// Build a model from explicit tables (used for crafted test targets).
    /// Every conditional row must be a probability distribution.
    pub fn from_parts(
        vocab: usize,
        hidden_dim: usize,
        num_domains: usize,
        table: Vec<f64>,
        hidden_proj: Vec<f64>,
    ) -> Result<Self> {
        if table.len() != vocab * vocab * vocab {
            return Err(Error::DimensionMismatch {
                expected: vocab * vocab * vocab,
                got: table.len(),
            });
        }
        if hidden_proj.len() != hidden_dim * 2 * vocab {
            return Err(Error::DimensionMismatch {
                expected: hidden_dim * 2 * vocab,
                got: hidden_proj.len(),
            });
        }
        for (i, row) in table.chunks(vocab).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidArgument(format!(
                    "conditional row {i} is not a probability distribution (sum {sum})"
                )));
            }
        }
        Ok(TargetModel { vocab, hidden_dim, num_domains, table, hidden_proj })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    fn check_token(&self, t: u32) -> Result<()> {
        if (t as usize) < self.vocab {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange { token: t, vocab: self.vocab })
        }
    }

    /// Conditional next-token distribution given the previous two tokens.
    pub fn next_dist(&self, prev2: u32, prev1: u32) -> Result<&[f64]> {
        self.check_token(prev2)?;
        self.check_token(prev1)?;
        let off = (prev2 as usize * self.vocab + prev1 as usize) * self.vocab;
        Ok(&self.table[off..off + self.vocab])
    }

    /// Greedy next token (lowest index wins ties).
    pub fn argmax_next(&self, prev2: u32, prev1: u32) -> Result<u32> {
        Ok(argmax(self.next_dist(prev2, prev1)?) as u32)
    }

    /// Hidden feature vector for a context: the fixed projection applied to
    /// the concatenated one-hot encodings of `prev2` and `prev1`.
    pub fn hidden(&self, prev2: u32, prev1: u32) -> Result<Vec<f64>> {
        self.check_token(prev2)?;
        self.check_token(prev1)?;
        let cols = 2 * self.vocab;
        let h = (0..self.hidden_dim)
            .map(|j| {
                self.hidden_proj[j * cols + prev2 as usize]
                    + self.hidden_proj[j * cols + self.vocab + prev1 as usize]
            })
            .collect();
        Ok(h)
    }

    /// Raw projection matrix (row-major `hidden_dim x 2*vocab`).
    pub fn hidden_proj(&self) -> &[f64] {
        &self.hidden_proj
    }
}

/// Preferred successor of `prev1 = b`: a seeded pick inside `b`'s block.
fn preferred_successor(cfg: &TargetConfig, b: u32) -> u32 {
    let block = domain_token_range(
        cfg.vocab_size,
        cfg.num_domains,
        domain_of_token(cfg.vocab_size, cfg.num_domains, b),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x50_5245_46, b as u64));
    block.start + rng.random_range(0..block.len() as u32)
}

/// Fill one conditional row `p(. | a, b)`.
fn generate_row(cfg: &TargetConfig, a: u32, b: u32, preferred: u32, row: &mut [f64]) {
    let v = cfg.vocab_size;
    let s = cfg.sparsity;
    let block = domain_token_range(v, cfg.num_domains, domain_of_token(v, cfg.num_domains, b));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, a as u64, b as u64));

    // Successor set: the preferred token plus s-1 distinct others from the block.
    let mut succ = vec![preferred];
    while succ.len() < s {
        let t = block.start + rng.random_range(0..block.len() as u32);
        if !succ.contains(&t) {
            succ.push(t);
        }
    }

    let coherent = rng.random_bool(cfg.coherence);
    // Positive weights with a floor so the top successor clearly dominates noise.
    let mut weights: Vec<f64> = (0..s)
        .map(|_| 0.25 - (1.0 - rng.random::<f64>()).ln())
        .collect();
    weights.sort_by(|x, y| y.partial_cmp(x).unwrap());

    // Which successor receives the largest weight (i.e. the row argmax):
    // the preferred token on coherent rows, otherwise a random other successor.
    let winner = if coherent || s == 1 { 0 } else { rng.random_range(1..s) };
    let mut assigned = vec![0.0; s];
    assigned[winner] = weights[0];
    let mut wi = 1;
    for (i, slot) in assigned.iter_mut().enumerate() {
        if i != winner {
            *slot = weights[wi];
            wi += 1;
        }
    }

    let succ_mass: f64 = assigned.iter().sum();
    for (&t, &w) in succ.iter().zip(assigned.iter()) {
        row[t as usize] = w / succ_mass * (1.0 - cfg.noise);
    }

    // Noise mass over the complement, itself noisy.
    if cfg.noise > 0.0 {
        let mut noise_w = vec![0.0; v];
        let mut total = 0.0;
        for (t, nw) in noise_w.iter_mut().enumerate() {
            if !succ.contains(&(t as u32)) {
                *nw = -(1.0 - rng.random::<f64>()).ln();
                total += *nw;
            }
        }
        for (t, nw) in noise_w.iter().enumerate() {
            if *nw > 0.0 {
                row[t] = nw / total * cfg.noise;
            }
        }
    }

    let sum: f64 = row.iter().sum();
    for p in row.iter_mut() {
        *p /= sum;
    }
}

// ---------------------------------------------------------------------------
// Drafter
// ---------------------------------------------------------------------------

/// Linear-softmax drafter. Features are the concatenated one-hots of the
/// previous two tokens, optionally followed by a hidden feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftParams {
    vocab: usize,
    hidden_dim: usize,
    use_hidden: bool,
    version: u64,
    /// Row-major `vocab x feature_dim`.
    weight: Vec<f64>,
}

impl DraftParams {
    pub fn zeros(vocab: usize, hidden_dim: usize, use_hidden: bool) -> Self {
        let feat = Self::feat_dim(vocab, hidden_dim, use_hidden);
        DraftParams { vocab, hidden_dim, use_hidden, version: 0, weight: vec![0.0; vocab * feat] }
    }

    /// Small seeded uniform init in `[-scale, scale]`.
    pub fn random(vocab: usize, hidden_dim: usize, use_hidden: bool, scale: f64, seed: u64) -> Self {
        let feat = Self::feat_dim(vocab, hidden_dim, use_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x44_5246, 0x494E_4954));
        let weight = (0..vocab * feat)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        DraftParams { vocab, hidden_dim, use_hidden, version: 0, weight }
    }

    /// Build from an explicit weight matrix (crafted drafters in tests).
    pub fn from_weights(
        vocab: usize,
        hidden_dim: usize,
        use_hidden: bool,
        weight: Vec<f64>,
        version: u64,
    ) -> Result<Self> {
        let feat = Self::feat_dim(vocab, hidden_dim, use_hidden);
        if weight.len() != vocab * feat {
            return Err(Error::DimensionMismatch { expected: vocab * feat, got: weight.len() });
        }
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("drafter weights".into()));
        }
        Ok(DraftParams { vocab, hidden_dim, use_hidden, version, weight })
    }

    fn feat_dim(vocab: usize, hidden_dim: usize, use_hidden: bool) -> usize {
        2 * vocab + if use_hidden { hidden_dim } else { 0 }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn use_hidden(&self) -> bool {
        self.use_hidden
    }

    pub fn feature_dim(&self) -> usize {
        Self::feat_dim(self.vocab, self.hidden_dim, self.use_hidden)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    fn check_token(&self, t: u32) -> Result<()> {
        if (t as usize) < self.vocab {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange { token: t, vocab: self.vocab })
        }
    }

    /// Logits for a context. `hidden` is required iff the drafter was built
    /// with hidden conditioning and must then have length `hidden_dim`.
    pub fn logits(&self, prev2: u32, prev1: u32, hidden: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_token(prev2)?;
        self.check_token(prev1)?;
        let h = match (self.use_hidden, hidden) {
            (true, Some(h)) => {
                if h.len() != self.hidden_dim {
                    return Err(Error::DimensionMismatch { expected: self.hidden_dim, got: h.len() });
                }
                Some(h)
            }
            (true, None) => return Err(Error::MissingHidden),
            (false, _) => None,
        };
        let feat = self.feature_dim();
        let mut logits = Vec::with_capacity(self.vocab);
        for t in 0..self.vocab {
            let row = &self.weight[t * feat..(t + 1) * feat];
            let mut z = row[prev2 as usize] + row[self.vocab + prev1 as usize];
            if let Some(h) = h {
                for (j, hj) in h.iter().enumerate() {
                    z += row[2 * self.vocab + j] * hj;
                }
            }
            logits.push(z);
        }
        Ok(logits)
    }

    /// Logits plus the softmax distribution over the next token.
    pub fn forward(&self, prev2: u32, prev1: u32, hidden: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let logits = self.logits(prev2, prev1, hidden)?;
        let probs = softmax(&logits);
        Ok((logits, probs))
    }

    /// Top-k proposals, sorted by descending probability; ties broken by
    /// lowest token index. Errors when `k` exceeds the vocabulary.
    pub fn top_k(
        &self,
        prev2: u32,
        prev1: u32,
        hidden: Option<&[f64]>,
        k: usize,
    ) -> Result<Vec<(u32, f64)>> {
        if k == 0 || k > self.vocab {
            return Err(Error::KOutOfRange { k, vocab: self.vocab });
        }
        let (_, probs) = self.forward(prev2, prev1, hidden)?;
        Ok(top_k_of(&probs, k))
    }

    /// Serializable snapshot. Refuses non-finite parameters.
    pub fn to_snapshot(&self) -> Result<Snapshot> {
        if self.weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("drafter weights".into()));
        }
        Ok(Snapshot {
            vocab_size: self.vocab,
            feature_dim: self.feature_dim(),
            hidden_dim: self.hidden_dim,
            use_hidden: self.use_hidden,
            version: self.version,
            weights: self.weight.clone(),
        })
    }

    pub fn from_snapshot(s: &Snapshot) -> Result<Self> {
        let expected = Self::feat_dim(s.vocab_size, s.hidden_dim, s.use_hidden);
        if s.feature_dim != expected {
            return Err(Error::DimensionMismatch { expected, got: s.feature_dim });
        }
        Self::from_weights(s.vocab_size, s.hidden_dim, s.use_hidden, s.weights.clone(), s.version)
    }
}

/// Sorted top-k of a probability vector (descending, ties to lowest index).
pub fn top_k_of(probs: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..probs.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        probs[b as usize]
            .partial_cmp(&probs[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.into_iter().map(|i| (i, probs[i as usize])).collect()
}

/// Flat serialized form of a drafter: a header plus the weight matrix.
/// JSON round-trips are bit-exact for finite values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Snapshot {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub use_hidden: bool,
    pub version: u64,
    pub weights: Vec<f64>,
}

impl Snapshot {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
