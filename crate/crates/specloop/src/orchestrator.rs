//! The closed training–serving loop: serve requests speculatively, stream
//! verification traces to the buffer, train between requests (or on a real
//! concurrent thread), and periodically hot-swap the serving drafter.
//!
//! Two execution modes share one per-request core:
//!
//! * **deterministic** — a discrete-event interleaving on the simulated
//!   clock: after each request the learner consumes every complete
//!   micro-batch, and scheduled swaps happen at the request boundary.
//!   Identical (config, seed) reproduces byte-identical outputs. Training
//!   compute is charged to a separate learner clock, so training never
//!   blocks serving.
//! * **threaded** — the learner runs on its own thread against the shared
//!   buffer and publishes snapshots as it goes; serving pins a snapshot per
//!   request and installs the newest published one at scheduled boundaries.
//!   Timing-dependent, so only structural guarantees hold (pinning,
//!   monotone versions, losslessness).
//!
//! Simulated-time accounting: a request's window is `[arrival, completion]`
//! where arrival is the previous request's completion. A foreground swap
//! charged between two requests therefore widens the next request's window
//! — sync pressure is visible as a throughput dip on the next row.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::config::{DrafterInit, ExecMode, ExperimentConfig};
use crate::engine::{greedy_decode, speculative_decode, StepOutcome};
use crate::error::{Error, Result};
use crate::learner::{Learner, StepMetrics};
use crate::model::{DraftParams, Snapshot, TargetModel};
use crate::sim::{moving_average, CostModel, MetricsRow, SimClock};
use crate::trace::{build_trace_record, TraceBuffer, TraceRecord};
use crate::traffic::{make_stream, Request};

/// Run-level aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_moving_avg_accept_len: f64,
    pub mean_throughput: f64,
    pub total_sim_time: f64,
    pub syncs: u64,
    pub drops: u64,
    pub mean_staleness: f64,
    pub total_sync_time: f64,
    pub stale_pushes: u64,
    pub learner_sim_time: f64,
    pub sync_interval_requests: u64,
    pub run_seed: u64,
    pub mode: String,
    pub loss_direction: String,
}

/// Everything a finished experiment produced.
#[derive(Debug)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub learner_steps: Vec<StepMetrics>,
    pub summary: Summary,
    /// The learner's parameters at the end of the run.
    pub final_snapshot: Snapshot,
    /// Emitted token sequence per request, aligned with `rows`.
    pub outputs: Vec<Vec<u32>>,
    /// Every snapshot that ever served traffic (initial + each install),
    /// in installation order — enough to replay any request offline.
    pub served_snapshots: Vec<Snapshot>,
}

/// Per-request serving outcome before metrics bookkeeping.
struct ServedRequest {
    tokens: Vec<u32>,
    steps: Vec<StepOutcome>,
    charge: f64,
    verify_steps: usize,
    accept_len_mean: f64,
}

fn serve_request(
    model: &TargetModel,
    drafter: &DraftParams,
    req: &Request,
    cfg: &ExperimentConfig,
    cost: &CostModel,
) -> Result<ServedRequest> {
    if cfg.run.speculation {
        let out = speculative_decode(model, drafter, &req.prompt, req.max_output, &cfg.engine)?;
        let verify_steps = out.steps.len();
        let proposed: usize = out.steps.iter().map(|s| s.tree.nodes.len()).sum();
        let charge =
            verify_steps as f64 * cost.target_step() + proposed as f64 * cost.draft_step();
        let accept_sum: usize = out.steps.iter().map(|s| s.verify.accept_len).sum();
        Ok(ServedRequest {
            tokens: out.tokens,
            accept_len_mean: accept_sum as f64 / verify_steps as f64,
            steps: out.steps,
            charge,
            verify_steps,
        })
    } else {
        let tokens = greedy_decode(model, &req.prompt, req.max_output)?;
        let verify_steps = tokens.len();
        let charge = verify_steps as f64 * cost.target_step();
        Ok(ServedRequest {
            tokens,
            steps: Vec::new(),
            charge,
            verify_steps,
            accept_len_mean: 1.0,
        })
    }
}

/// Build the initial drafter parameters for a config.
fn initial_drafter(cfg: &ExperimentConfig, model: &TargetModel) -> Result<DraftParams> {
    let v = model.vocab_size();
    let h = model.hidden_dim();
    let params = match cfg.drafter.init {
        DrafterInit::Zeros => DraftParams::zeros(v, h, cfg.drafter.use_hidden),
        DrafterInit::Random => DraftParams::random(
            v,
            h,
            cfg.drafter.use_hidden,
            cfg.drafter.init_scale,
            cfg.drafter_seed(),
        ),
        DrafterInit::Pretrained => {
            let path = cfg.drafter.checkpoint.as_ref().expect("validated");
            let snap = Snapshot::load(path)?;
            let params = DraftParams::from_snapshot(&snap)?;
            let mut issues = Vec::new();
            if params.vocab_size() != v {
                issues.push(format!(
                    "checkpoint vocab {} does not match model vocab {v}",
                    params.vocab_size()
                ));
            }
            if params.use_hidden() != cfg.drafter.use_hidden {
                issues.push(format!(
                    "checkpoint use_hidden={} but drafter.use_hidden={}",
                    params.use_hidden(),
                    cfg.drafter.use_hidden
                ));
            }
            if params.use_hidden() && params.hidden_dim() != h {
                issues.push(format!(
                    "checkpoint hidden_dim {} does not match model hidden_dim {h}",
                    params.hidden_dim()
                ));
            }
            if !issues.is_empty() {
                return Err(Error::InvalidConfig { issues });
            }
            params
        }
    };
    Ok(params)
}

/// Optional per-record callback; used by the CLI to stream `traces.jsonl`.
pub type TraceSink<'a> = &'a mut dyn FnMut(&TraceRecord) -> Result<()>;

/// Run one experiment to completion.
pub fn run_experiment(cfg: &ExperimentConfig, sink: Option<TraceSink>) -> Result<RunResult> {
    cfg.validate()?;
    let model = TargetModel::generate(&cfg.model_config())?;
    let params = initial_drafter(cfg, &model)?;
    let learner = Learner::new(params.clone(), cfg.learner_config()?)?;
    let stream = {
        let mut s = make_stream(
            model.vocab_size(),
            model.num_domains(),
            &cfg.domain_specs(),
            cfg.traffic.mode,
            cfg.traffic_seed(),
        )?;
        if cfg.traffic.limit > 0 {
            s.truncate(cfg.traffic.limit);
        }
        s
    };
    if stream.is_empty() {
        return Err(Error::InvalidConfig { issues: vec!["request stream is empty".into()] });
    }
    match cfg.run.mode {
        ExecMode::Deterministic => run_deterministic(cfg, &model, params, learner, &stream, sink),
        ExecMode::Threaded => run_threaded(cfg, &model, params, learner, &stream, sink),
    }
}

/// Offline pretraining: run the loop (deterministic, training forced on)
/// over the configured stream and return the converged result; the caller
/// saves `final_snapshot` as a checkpoint.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<RunResult> {
    let mut c = cfg.clone();
    c.run.mode = ExecMode::Deterministic;
    c.run.speculation = true;
    c.train.enabled = true;
    run_experiment(&c, None)
}

struct LoopState<'a> {
    cfg: &'a ExperimentConfig,
    rows: Vec<MetricsRow>,
    outputs: Vec<Vec<u32>>,
    served_snapshots: Vec<Snapshot>,
    clock: SimClock,
    /// Previous row's completion time; the next row's window starts here so
    /// rows tile the timeline and any foreground sync charged between two
    /// requests shows up inside the next row's window (a throughput dip).
    last_end: f64,
    syncs: u64,
    stale_pushes: u64,
    total_sync_time: f64,
}

impl<'a> LoopState<'a> {
    fn new(cfg: &'a ExperimentConfig, n_requests: usize, initial: &DraftParams) -> Result<Self> {
        Ok(LoopState {
            cfg,
            rows: Vec::with_capacity(n_requests),
            outputs: Vec::with_capacity(n_requests),
            served_snapshots: vec![initial.to_snapshot()?],
            clock: SimClock::new(),
            last_end: 0.0,
            syncs: 0,
            stale_pushes: 0,
            total_sync_time: 0.0,
        })
    }

    /// Metrics bookkeeping for one completed request.
    fn record_row(&mut self, req: &Request, served: ServedRequest, version: u64) -> Result<()> {
        let sim_start = self.last_end;
        let sim_end = self.clock.advance(served.charge)?;
        self.last_end = sim_end;
        let tokens_in = req.prompt.len();
        let tokens_out = served.tokens.len();
        let throughput = (tokens_in + tokens_out) as f64 / (sim_end - sim_start);
        self.rows.push(MetricsRow {
            request_id: req.request_id,
            domain_id: req.domain_id,
            drafter_version_used: version,
            tokens_in,
            tokens_out,
            accept_len_mean: served.accept_len_mean,
            verify_steps: served.verify_steps,
            sim_start,
            sim_end,
            throughput,
        });
        self.outputs.push(served.tokens);
        Ok(())
    }

    /// Charge one scheduled sync and decide whether `snapshot` is fresh
    /// enough to install over `current_version`.
    fn sync_event(&mut self, snapshot: &Snapshot, current_version: u64) -> Result<bool> {
        self.syncs += 1;
        self.total_sync_time += self.cfg.cost.sync_cost;
        if !self.cfg.sync.background {
            self.clock.advance(self.cfg.cost.sync_cost)?;
        }
        if snapshot.version > current_version {
            self.served_snapshots.push(snapshot.clone());
            Ok(true)
        } else {
            self.stale_pushes += 1;
            log::warn!(
                "stale push at sync {}: snapshot version {} <= serving version {}",
                self.syncs,
                snapshot.version,
                current_version
            );
            Ok(false)
        }
    }

    fn into_result(
        self,
        learner_steps: Vec<StepMetrics>,
        learner_sim_time: f64,
        drops: u64,
        final_snapshot: Snapshot,
    ) -> Result<RunResult> {
        let accept_series: Vec<f64> = self.rows.iter().map(|r| r.accept_len_mean).collect();
        let ma = moving_average(&accept_series, self.cfg.run.moving_avg_window)?;
        let trained_records: u64 = learner_steps.iter().map(|m| m.records as u64).sum();
        let mean_staleness = if trained_records > 0 {
            learner_steps
                .iter()
                .map(|m| m.mean_staleness * m.records as f64)
                .sum::<f64>()
                / trained_records as f64
        } else {
            0.0
        };
        let summary = Summary {
            final_moving_avg_accept_len: *ma.last().expect("nonempty stream"),
            mean_throughput: self.rows.iter().map(|r| r.throughput).sum::<f64>()
                / self.rows.len() as f64,
            total_sim_time: self.clock.now(),
            syncs: self.syncs,
            drops,
            mean_staleness,
            total_sync_time: self.total_sync_time,
            stale_pushes: self.stale_pushes,
            learner_sim_time,
            sync_interval_requests: self.cfg.sync.interval_requests,
            run_seed: self.cfg.run.seed,
            mode: self.cfg.run.mode.as_str().to_string(),
            loss_direction: match self.cfg.loss.resolve()?.direction {
                crate::loss::KlDirection::Forward => "forward".to_string(),
                crate::loss::KlDirection::Reverse => "reverse".to_string(),
            },
        };
        Ok(RunResult {
            rows: self.rows,
            learner_steps,
            summary,
            final_snapshot,
            outputs: self.outputs,
            served_snapshots: self.served_snapshots,
        })
    }
}

/// Emit one request's trace records (streaming them to the sink when
/// present) and append them to the buffer when training is on.
#[allow(clippy::too_many_arguments)]
fn emit_traces(
    cfg: &ExperimentConfig,
    model: &TargetModel,
    req: &Request,
    steps: &[StepOutcome],
    version: u64,
    arrived_at: f64,
    buffer: Option<&Mutex<TraceBuffer>>,
    sink: &mut Option<TraceSink>,
) -> Result<()> {
    if sink.is_none() && buffer.is_none() {
        return Ok(());
    }
    let draft_vocab = cfg.draft_vocab();
    for (i, step) in steps.iter().enumerate() {
        let record = build_trace_record(
            req.request_id,
            i as u32,
            step,
            version,
            cfg.trace.compress_top_k,
            draft_vocab.as_deref(),
            cfg.drafter.use_hidden,
            model,
        )?;
        if let Some(f) = sink.as_mut() {
            f(&record)?;
        }
        if let Some(buf) = buffer {
            buf.lock().append(record, arrived_at)?;
        }
    }
    Ok(())
}

fn run_deterministic(
    cfg: &ExperimentConfig,
    model: &TargetModel,
    params: DraftParams,
    mut learner: Learner,
    stream: &[Request],
    mut sink: Option<TraceSink>,
) -> Result<RunResult> {
    let mut state = LoopState::new(cfg, stream.len(), &params)?;
    let mut serving = params;
    let buffer = Mutex::new(TraceBuffer::new(cfg.train.buffer_capacity)?);
    let mut learner_steps = Vec::new();
    let mut learner_clock = 0.0;

    for (idx, req) in stream.iter().enumerate() {
        let version = serving.version();
        let served = serve_request(model, &serving, req, cfg, &cfg.cost)?;
        let arrived_at = state.clock.now();
        if cfg.run.speculation {
            emit_traces(
                cfg,
                model,
                req,
                &served.steps,
                version,
                arrived_at,
                cfg.train.enabled.then_some(&buffer),
                &mut sink,
            )?;
        }
        state.record_row(req, served, version)?;

        if cfg.train.enabled {
            loop {
                let batch = buffer.lock().fetch_batch(cfg.train.micro_batch);
                match batch {
                    Some(b) => {
                        learner_steps.push(learner.train_step(&b)?);
                        learner_clock += cfg.cost.train_step_cost;
                    }
                    None => break,
                }
            }
        }

        if cfg.sync.due(idx as u64 + 1) {
            let snap = learner.snapshot()?;
            if state.sync_event(&snap, serving.version())? {
                serving = DraftParams::from_snapshot(&snap)?;
            }
        }
    }

    let drops = buffer.lock().counters().dropped;
    let final_snapshot = learner.snapshot()?;
    state.into_result(learner_steps, learner_clock, drops, final_snapshot)
}

fn run_threaded(
    cfg: &ExperimentConfig,
    model: &TargetModel,
    params: DraftParams,
    learner: Learner,
    stream: &[Request],
    mut sink: Option<TraceSink>,
) -> Result<RunResult> {
    let mut state = LoopState::new(cfg, stream.len(), &params)?;
    let buffer = Arc::new(Mutex::new(TraceBuffer::new(cfg.train.buffer_capacity)?));
    let serving: RwLock<Arc<DraftParams>> = RwLock::new(Arc::new(params));
    let latest: Arc<Mutex<Option<Snapshot>>> = Arc::new(Mutex::new(None));
    let stop = Arc::new(AtomicBool::new(false));

    type LearnerOutcome = Result<(Vec<StepMetrics>, f64, Learner)>;
    let mut idle_learner = None;
    let learner_handle: Option<std::thread::JoinHandle<LearnerOutcome>> = if cfg.train.enabled {
        let buffer = Arc::clone(&buffer);
        let latest = Arc::clone(&latest);
        let stop = Arc::clone(&stop);
        let micro = cfg.train.micro_batch;
        let step_cost = cfg.cost.train_step_cost;
        let mut learner = learner;
        Some(std::thread::spawn(move || {
            let mut steps = Vec::new();
            let mut clock = 0.0;
            loop {
                let batch = buffer.lock().fetch_batch(micro);
                match batch {
                    Some(b) => {
                        steps.push(learner.train_step(&b)?);
                        clock += step_cost;
                        *latest.lock() = Some(learner.snapshot()?);
                    }
                    None => {
                        if stop.load(Ordering::Acquire) {
                            // Serving has finished appending; drain whatever
                            // complete batches remain, then exit.
                            match buffer.lock().fetch_batch(micro) {
                                Some(b) => {
                                    steps.push(learner.train_step(&b)?);
                                    clock += step_cost;
                                    *latest.lock() = Some(learner.snapshot()?);
                                }
                                None => break,
                            }
                        } else {
                            std::thread::yield_now();
                        }
                    }
                }
            }
            Ok((steps, clock, learner))
        }))
    } else {
        idle_learner = Some(learner);
        None
    };

    let mut serve_error = None;
    for (idx, req) in stream.iter().enumerate() {
        let pinned = serving.read().clone();
        let version = pinned.version();
        let outcome = (|| -> Result<()> {
            let served = serve_request(model, &pinned, req, cfg, &cfg.cost)?;
            let arrived_at = state.clock.now();
            if cfg.run.speculation {
                emit_traces(
                    cfg,
                    model,
                    req,
                    &served.steps,
                    version,
                    arrived_at,
                    cfg.train.enabled.then_some(buffer.as_ref()),
                    &mut sink,
                )?;
            }
            state.record_row(req, served, version)?;
            if cfg.sync.due(idx as u64 + 1) {
                let snap = latest.lock().clone();
                if let Some(snap) = snap {
                    if state.sync_event(&snap, version)? {
                        *serving.write() = Arc::new(DraftParams::from_snapshot(&snap)?);
                    }
                } else {
                    // Nothing published yet: still a scheduled (stale) sync.
                    let current = serving.read().to_snapshot()?;
                    state.sync_event(&current, version)?;
                }
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            serve_error = Some(e);
            break;
        }
    }

    stop.store(true, Ordering::Release);
    let (learner_steps, learner_clock, final_learner) = match learner_handle {
        Some(h) => {
            let joined = h.join().map_err(|_| Error::Integrity("learner thread panicked".into()))?;
            joined?
        }
        None => (Vec::new(), 0.0, idle_learner.expect("learner kept when training disabled")),
    };
    if let Some(e) = serve_error {
        return Err(e);
    }

    let drops = buffer.lock().counters().dropped;
    let final_snapshot = final_learner.snapshot()?;
    state.into_result(learner_steps, learner_clock, drops, final_snapshot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    /// Small, fast world: V=16, two domains, 80 requests.
    fn test_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.vocab_size = 16;
        cfg.model.hidden_dim = 4;
        cfg.model.num_domains = 2;
        cfg.model.sparsity = 3;
        cfg.model.coherence = 0.9;
        cfg.engine.gamma = 3;
        cfg.engine.max_nodes = 16;
        cfg.traffic.requests_per_domain = 40;
        cfg.traffic.prompt_len = [2, 3];
        cfg.traffic.max_output = [4, 8];
        cfg.train.micro_batch = 4;
        cfg.train.buffer_capacity = 64;
        cfg.train.warmup_steps = 20;
        cfg.train.base_lr = 0.1;
        cfg.sync.interval_requests = 10;
        cfg.run.moving_avg_window = 10;
        cfg
    }

    #[test]
    fn baseline_matches_closed_form_costs() {
        let mut cfg = test_cfg();
        cfg.run.speculation = false;
        let r = run_experiment(&cfg, None).unwrap();
        assert_eq!(r.rows.len(), 80);
        let step = cfg.cost.target_step();
        for row in &r.rows {
            let dur = row.sim_end - row.sim_start;
            let expect = row.tokens_out as f64 * step;
            // Sync gaps land inside a row's window; subtract them back out.
            let gap = dur - expect;
            assert!(
                gap.abs() < 1e-9 || (gap - cfg.cost.sync_cost).abs() < 1e-9,
                "row {} duration {dur} vs closed form {expect}",
                row.request_id
            );
            assert_eq!(row.accept_len_mean, 1.0);
            assert_eq!(row.verify_steps, row.tokens_out);
            assert!((row.throughput - row.computed_throughput()).abs() < 1e-12);
        }
        // No speculation → no traces → no training → stale pushes only.
        assert!(r.learner_steps.is_empty());
        assert_eq!(r.summary.stale_pushes, r.summary.syncs);
        assert!(r.rows.iter().all(|row| row.drafter_version_used == 0));
    }

    #[test]
    fn deterministic_reruns_are_bit_identical() {
        let cfg = test_cfg();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.request_id, y.request_id);
            assert_eq!(x.accept_len_mean.to_bits(), y.accept_len_mean.to_bits());
            assert_eq!(x.sim_end.to_bits(), y.sim_end.to_bits());
            assert_eq!(x.throughput.to_bits(), y.throughput.to_bits());
            assert_eq!(x.drafter_version_used, y.drafter_version_used);
        }
        assert_eq!(a.learner_steps.len(), b.learner_steps.len());
        for (x, y) in a.learner_steps.iter().zip(&b.learner_steps) {
            assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
        }
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn clock_tiles_exactly_and_sync_time_is_exact() {
        let cfg = test_cfg();
        let r = run_experiment(&cfg, None).unwrap();
        assert_eq!(r.rows[0].sim_start, 0.0);
        for w in r.rows.windows(2) {
            assert_eq!(w[0].sim_end, w[1].sim_start, "rows must tile the timeline");
        }
        let expected_syncs = 80 / cfg.sync.interval_requests;
        assert_eq!(r.summary.syncs, expected_syncs);
        assert_eq!(r.summary.total_sync_time, expected_syncs as f64 * cfg.cost.sync_cost);
        // Request 80 itself triggers a sync, charged after the last row.
        assert_eq!(
            r.summary.total_sim_time,
            r.rows.last().unwrap().sim_end + cfg.cost.sync_cost
        );
    }

    #[test]
    fn versions_change_only_at_sync_boundaries() {
        let cfg = test_cfg();
        let r = run_experiment(&cfg, None).unwrap();
        let interval = cfg.sync.interval_requests as usize;
        let mut changes = 0;
        for (i, w) in r.rows.windows(2).enumerate() {
            let (prev, next) = (w[0].drafter_version_used, w[1].drafter_version_used);
            assert!(next >= prev, "versions must be non-decreasing");
            if next != prev {
                changes += 1;
                // Row index i+1 starts a new window right after a sync.
                assert_eq!((i + 1) % interval, 0, "swap visible off-boundary at row {}", i + 1);
            }
        }
        assert!(changes > 0, "training plus syncing must eventually swap");
        // Every installed snapshot is recorded for replay.
        let versions: Vec<u64> = r.served_snapshots.iter().map(|s| s.version).collect();
        for row in &r.rows {
            assert!(versions.contains(&row.drafter_version_used));
        }
    }

    #[test]
    fn sync_disabled_keeps_version_constant() {
        let mut cfg = test_cfg();
        cfg.sync.enabled = false;
        let r = run_experiment(&cfg, None).unwrap();
        assert!(r.rows.iter().all(|row| row.drafter_version_used == 0));
        assert_eq!(r.summary.syncs, 0);
        assert_eq!(r.summary.total_sync_time, 0.0);
        assert_eq!(r.served_snapshots.len(), 1);
        // The learner still trained; its snapshot is just never installed.
        assert!(!r.learner_steps.is_empty());
        assert!(r.final_snapshot.version > 0);
    }

    #[test]
    fn frozen_drafter_syncs_are_all_stale() {
        let mut cfg = test_cfg();
        cfg.train.enabled = false;
        let r = run_experiment(&cfg, None).unwrap();
        assert_eq!(r.summary.stale_pushes, r.summary.syncs);
        assert!(r.summary.syncs > 0);
        assert!(r.rows.iter().all(|row| row.drafter_version_used == 0));
        assert_eq!(r.summary.mean_staleness, 0.0);
        assert!(r.learner_steps.is_empty());
        // Sync cost is still charged even though every push is stale.
        assert_eq!(r.summary.total_sync_time, r.summary.syncs as f64 * cfg.cost.sync_cost);
    }

    #[test]
    fn emitted_tokens_are_invariant_across_loop_configurations() {
        // Losslessness composes through the loop: training, syncing, loss
        // choice, and trace compression never change served tokens.
        let base = test_cfg();
        let reference = run_experiment(&base, None).unwrap();

        let mut no_sync = base.clone();
        no_sync.sync.enabled = false;
        let mut frozen = base.clone();
        frozen.train.enabled = false;
        let mut rkl_discard = base.clone();
        rkl_discard.loss.variant = Some("rkl_discard".into());
        let mut compressed = base.clone();
        compressed.trace.compress_top_k = 4;
        let mut random_init = base.clone();
        random_init.drafter.init = crate::config::DrafterInit::Random;

        for (name, cfg) in [
            ("no_sync", no_sync),
            ("frozen", frozen),
            ("rkl_discard", rkl_discard),
            ("compressed", compressed),
            ("random_init", random_init),
        ] {
            let r = run_experiment(&cfg, None).unwrap();
            assert_eq!(r.outputs, reference.outputs, "{name} changed served tokens");
        }
    }

    #[test]
    fn trace_sink_streams_every_verification_step() {
        let cfg = test_cfg();
        let mut count = 0usize;
        {
            let mut sink = |_r: &TraceRecord| -> Result<()> {
                count += 1;
                Ok(())
            };
            let r = run_experiment(&cfg, Some(&mut sink)).unwrap();
            let steps: usize = r.rows.iter().map(|row| row.verify_steps).sum();
            assert_eq!(count, steps);
        }

        // Streaming works even with training disabled.
        let mut frozen = test_cfg();
        frozen.train.enabled = false;
        let mut count2 = 0usize;
        let mut sink2 = |_r: &TraceRecord| -> Result<()> {
            count2 += 1;
            Ok(())
        };
        run_experiment(&frozen, Some(&mut sink2)).unwrap();
        assert!(count2 > 0);
    }

    #[test]
    fn tiny_buffer_counts_drops() {
        let mut cfg = test_cfg();
        cfg.train.buffer_capacity = cfg.train.micro_batch;
        // Slow the learner's drain by batching more records per request
        // than the buffer holds.
        cfg.traffic.max_output = [8, 8];
        let r = run_experiment(&cfg, None).unwrap();
        assert!(r.summary.drops > 0, "a buffer this small must overflow");
    }

    #[test]
    fn training_improves_acceptance_end_to_end() {
        let mut cfg = test_cfg();
        cfg.traffic.requests_per_domain = 300;
        cfg.run.moving_avg_window = 50;
        let r = run_experiment(&cfg, None).unwrap();
        let series: Vec<f64> = r.rows.iter().map(|row| row.accept_len_mean).collect();
        let ma = moving_average(&series, 50).unwrap();
        assert!(
            ma[ma.len() - 1] > ma[49] + 0.3,
            "acceptance should improve: start {} end {}",
            ma[49],
            ma[ma.len() - 1]
        );
        assert!(r.summary.mean_staleness >= 0.0);
        assert!(r.summary.final_moving_avg_accept_len > 1.2);
    }

    #[test]
    fn pretrained_checkpoint_round_trips_through_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drafter.json");
        let mut pre_cfg = test_cfg();
        pre_cfg.traffic.requests_per_domain = 150;
        let pre = pretrain(&pre_cfg).unwrap();
        assert!(pre.final_snapshot.version > 0);
        pre.final_snapshot.save(&path).unwrap();

        let mut cfg = test_cfg();
        cfg.drafter.init = DrafterInit::Pretrained;
        cfg.drafter.checkpoint = Some(path);
        cfg.train.enabled = false;
        cfg.sync.enabled = false;
        let frozen_pre = run_experiment(&cfg, None).unwrap();
        let v = pre.final_snapshot.version;
        assert!(frozen_pre.rows.iter().all(|row| row.drafter_version_used == v));

        // The pretrained drafter serves better than a scratch one.
        let mut scratch = cfg.clone();
        scratch.drafter.init = DrafterInit::Zeros;
        scratch.drafter.checkpoint = None;
        let frozen_scratch = run_experiment(&scratch, None).unwrap();
        assert!(
            frozen_pre.summary.final_moving_avg_accept_len
                > frozen_scratch.summary.final_moving_avg_accept_len + 0.3
        );
    }

    #[test]
    fn threaded_mode_structural_guarantees() {
        let mut cfg = test_cfg();
        cfg.run.mode = ExecMode::Threaded;
        cfg.traffic.requests_per_domain = 100;
        let r = run_experiment(&cfg, None).unwrap();
        assert_eq!(r.rows.len(), 200);

        // Monotone versions, swaps only at boundaries.
        for w in r.rows.windows(2) {
            assert!(w[1].drafter_version_used >= w[0].drafter_version_used);
        }

        // Replay every request against its pinned snapshot: outputs must
        // reproduce exactly (losslessness + pinning).
        let model = TargetModel::generate(&cfg.model_config()).unwrap();
        let stream = make_stream(
            model.vocab_size(),
            model.num_domains(),
            &cfg.domain_specs(),
            cfg.traffic.mode,
            cfg.traffic_seed(),
        )
        .unwrap();
        for (i, row) in r.rows.iter().enumerate() {
            let snap = r
                .served_snapshots
                .iter()
                .find(|s| s.version == row.drafter_version_used)
                .expect("pinned snapshot must be recorded");
            let drafter = DraftParams::from_snapshot(snap).unwrap();
            let out = speculative_decode(
                &model,
                &drafter,
                &stream[i].prompt,
                stream[i].max_output,
                &cfg.engine,
            )
            .unwrap();
            assert_eq!(out.tokens, r.outputs[i], "request {i} replay diverged");
        }
    }

    #[test]
    fn invalid_config_is_rejected_before_running() {
        let mut cfg = test_cfg();
        cfg.sync.interval_requests = 0;
        assert!(matches!(run_experiment(&cfg, None), Err(Error::InvalidConfig { .. })));
    }
}
