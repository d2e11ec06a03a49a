//! Simulated-time plumbing: the cost model that converts work into
//! simulated seconds, the monotone clock, the hot-swap schedule, and the
//! per-request metrics row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine per-step costs in simulated seconds. A verification step on a
/// batch of `B` concurrent requests costs `a_target + b_target·B`; a draft
/// step costs `a_draft + b_draft·B`. Batch size is modeled as a cost
/// multiplier on a single request stream, not a real scheduler: larger
/// batches amortize the per-step constants differently for the target and
/// the drafter, which is what moves the speculation break-even point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub a_target: f64,
    pub b_target: f64,
    pub a_draft: f64,
    pub b_draft: f64,
    /// Simulated seconds charged per hot-swap.
    pub sync_cost: f64,
    /// Simulated seconds per training step, charged to the learner's own
    /// clock (training never blocks serving).
    pub train_step_cost: f64,
    /// Concurrent batch size `B`.
    pub batch_size: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            a_target: 1.0,
            b_target: 0.05,
            a_draft: 0.05,
            b_draft: 0.01,
            sync_cost: 40.0,
            train_step_cost: 5.0,
            batch_size: 1,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        for (name, v) in [
            ("a_target", self.a_target),
            ("b_target", self.b_target),
            ("a_draft", self.a_draft),
            ("b_draft", self.b_draft),
            ("sync_cost", self.sync_cost),
            ("train_step_cost", self.train_step_cost),
        ] {
            if !v.is_finite() || v < 0.0 {
                issues.push(format!("cost.{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.batch_size == 0 {
            issues.push("cost.batch_size must be >= 1".to_string());
        }
        if issues.is_empty() && self.draft_step() >= self.target_step() {
            issues.push(format!(
                "draft step ({}) must be cheaper than target step ({}) at batch size {}",
                self.draft_step(),
                self.target_step(),
                self.batch_size
            ));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }

    /// Cost of one target verification step at the configured batch size.
    pub fn target_step(&self) -> f64 {
        self.a_target + self.b_target * self.batch_size as f64
    }

    /// Cost of one draft proposal step (one proposed node).
    pub fn draft_step(&self) -> f64 {
        self.a_draft + self.b_draft * self.batch_size as f64
    }

    /// Draft/target cost ratio `c` implied by the configuration.
    pub fn cost_ratio(&self) -> f64 {
        self.draft_step() / self.target_step()
    }
}

/// When hot-swaps happen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncPolicy {
    pub enabled: bool,
    /// A swap is scheduled after every this-many completed requests.
    pub interval_requests: u64,
    /// When true the swap happens off the serving critical path: the cost is
    /// still accounted in total sync time but not charged to the serving
    /// clock.
    pub background: bool,
}

impl Default for SyncPolicy {
    fn default() -> Self {
        SyncPolicy { enabled: true, interval_requests: 80, background: false }
    }
}

impl SyncPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.interval_requests == 0 {
            return Err(Error::InvalidConfig {
                issues: vec!["sync.interval_requests must be >= 1".to_string()],
            });
        }
        Ok(())
    }

    /// Whether a swap is due once `completed` requests have finished.
    pub fn due(&self, completed: u64) -> bool {
        self.enabled && completed > 0 && completed % self.interval_requests == 0
    }
}

/// Monotone simulated clock.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now: f64,
}

impl SimClock {
    pub fn new() -> Self {
        SimClock { now: 0.0 }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Advance by a non-negative, finite amount.
    pub fn advance(&mut self, dt: f64) -> Result<f64> {
        if !dt.is_finite() || dt < 0.0 {
            return Err(Error::NonFinite(format!("clock advance of {dt}")));
        }
        self.now += dt;
        Ok(self.now)
    }
}

/// Per-request metrics. `sim_start` is the request's arrival — the previous
/// request's `sim_end` — so any sync charged between two requests shows up
/// as latency inside the next row's window.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub request_id: u64,
    pub domain_id: usize,
    pub drafter_version_used: u64,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub accept_len_mean: f64,
    pub verify_steps: usize,
    pub sim_start: f64,
    pub sim_end: f64,
    pub throughput: f64,
}

impl MetricsRow {
    /// `(tokens_in + tokens_out) / (sim_end - sim_start)` — the exact
    /// expression the `throughput` field must equal.
    pub fn computed_throughput(&self) -> f64 {
        (self.tokens_in + self.tokens_out) as f64 / (self.sim_end - self.sim_start)
    }
}

/// Trailing moving average: output i is the mean of the last
/// `min(window, i+1)` inputs.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::InvalidArgument("moving-average window must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= window {
            sum -= series[i - window];
        }
        let n = window.min(i + 1);
        out.push(sum / n as f64);
    }
    Ok(out)
}
