//! Closed-form performance analytics for speculative decoding.
//!
//! With per-token acceptance probability `alpha` and chain lookahead `gamma`,
//! the expected number of tokens committed per verification step is the
//! truncated geometric sum `E[L] = sum_{i=0..gamma} alpha^i` (the `+1` for
//! the Bernoulli chain of proposals plus the verifier's bonus token).
//! Wall-clock speedup over plain decoding follows as
//! `E[L] / (1 + gamma * c)` where `c` is the draft/target step-time ratio.
//!
//! The summation form is the reference implementation; the closed form
//! `(1 - alpha^(gamma+1)) / (1 - alpha)` is kept as an independent
//! cross-check (they must agree to 1e-12 away from `alpha = 1`).

use crate::error::{Error, Result};

/// Analytic operating point: acceptance rate, lookahead, and cost ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecParams {
    pub alpha: f64,
    pub gamma: u32,
    pub cost_ratio: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_gamma(gamma: u32) -> Result<()> {
    if gamma == 0 {
        return Err(Error::InvalidArgument("gamma must be >= 1".into()));
    }
    Ok(())
}

/// Expected accepted tokens per verification step (direct summation).
pub fn expected_accept_length(alpha: f64, gamma: u32) -> Result<f64> {
    check_alpha(alpha)?;
    check_gamma(gamma)?;
    let mut sum = 0.0;
    let mut term = 1.0;
    for _ in 0..=gamma {
        sum += term;
        term *= alpha;
    }
    Ok(sum)
}

/// Closed-form cross-check of [`expected_accept_length`];
/// degenerates to `gamma + 1` at `alpha = 1`.
pub fn expected_accept_length_closed(alpha: f64, gamma: u32) -> Result<f64> {
    check_alpha(alpha)?;
    check_gamma(gamma)?;
    if alpha == 1.0 {
        return Ok((gamma + 1) as f64);
    }
    Ok((1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha))
}

/// Expected speedup over one-token-per-step decoding given the cost ratio
/// `c = draft_step_time / target_step_time`.
pub fn expected_speedup(alpha: f64, gamma: u32, cost_ratio: f64) -> Result<f64> {
    if !(cost_ratio >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cost_ratio must be >= 0, got {cost_ratio}"
        )));
    }
    Ok(expected_accept_length(alpha, gamma)? / (1.0 + gamma as f64 * cost_ratio))
}

/// Auxiliary serving-side memory in bytes for trace capture:
/// `batch * (seq_len * 3*hidden * 2 + output_len * vocab * 2)`
/// (three fp16 hidden vectors per position plus fp16 logits per output token).
pub fn aux_memory_bytes(batch: u64, seq_len: u64, output_len: u64, hidden: u64, vocab: u64) -> u64 {
    batch * (seq_len * 3 * hidden * 2 + output_len * vocab * 2)
}

/// Per-request serving throughput in tokens per simulated time unit.
pub fn per_request_throughput(tokens_in: u64, tokens_out: u64, elapsed: f64) -> Result<f64> {
    if !(elapsed > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "elapsed time must be > 0, got {elapsed}"
        )));
    }
    Ok((tokens_in + tokens_out) as f64 / elapsed)
}
