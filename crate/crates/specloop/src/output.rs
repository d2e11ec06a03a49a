//! Byte-stable result files.
//!
//! Every float in `metrics.jsonl`, `learner.jsonl`, `summary.json`,
//! `sweep.csv`, and `traces.jsonl` is printed through one formatter
//! ([`fmt_float`]), and every object is written with a fixed key order, so
//! identical runs produce byte-identical files — `diff` (or a checksum) is
//! the reproducibility test. Drafter snapshots are exempt: they round-trip
//! bit-exactly through full-precision JSON instead.

use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use crate::error::{Error, Result};
use crate::learner::StepMetrics;
use crate::orchestrator::{RunResult, Summary};
use crate::sim::MetricsRow;
use crate::trace::TraceRecord;

/// Canonical float rendering: scientific, 9 significant digits.
/// Coarse enough to absorb nothing — the simulation is already
/// deterministic — but fixed so files are stable across platforms.
pub fn fmt_float(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x }; // normalize -0.0
    format!("{x:.8e}")
}

/// [`fmt_float`] with a non-finite guard; `what` names the field for the
/// error message.
fn ff(x: f64, what: &str) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("{what} = {x} cannot be serialized")));
    }
    Ok(fmt_float(x))
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

/// One `metrics.jsonl` line, fixed key order.
pub fn metrics_line(row: &MetricsRow) -> Result<String> {
    Ok(format!(
        concat!(
            "{{\"request_id\":{},\"domain_id\":{},\"drafter_version_used\":{},",
            "\"tokens_in\":{},\"tokens_out\":{},\"accept_len_mean\":{},",
            "\"verify_steps\":{},\"sim_start\":{},\"sim_end\":{},\"throughput\":{}}}"
        ),
        row.request_id,
        row.domain_id,
        row.drafter_version_used,
        row.tokens_in,
        row.tokens_out,
        ff(row.accept_len_mean, "metrics.accept_len_mean")?,
        row.verify_steps,
        ff(row.sim_start, "metrics.sim_start")?,
        ff(row.sim_end, "metrics.sim_end")?,
        ff(row.throughput, "metrics.throughput")?,
    ))
}

/// One `learner.jsonl` line, fixed key order.
pub fn learner_line(m: &StepMetrics) -> Result<String> {
    Ok(format!(
        concat!(
            "{{\"step\":{},\"loss_total\":{},\"loss_accept\":{},\"loss_discard\":{},",
            "\"loss_ntp\":{},\"grad_norm\":{},\"lr\":{},\"version\":{}}}"
        ),
        m.step,
        ff(m.loss_total, "learner.loss_total")?,
        ff(m.loss_accept, "learner.loss_accept")?,
        ff(m.loss_discard, "learner.loss_discard")?,
        ff(m.loss_ntp, "learner.loss_ntp")?,
        ff(m.grad_norm, "learner.grad_norm")?,
        ff(m.lr, "learner.lr")?,
        m.version,
    ))
}

/// `summary.json` body (pretty-printed, fixed key order, trailing newline).
pub fn summary_json(s: &Summary) -> Result<String> {
    let mut out = String::from("{\n");
    let mut field = |name: &str, value: String, last: bool| {
        out.push_str("  ");
        out.push_str(&json_str(name));
        out.push_str(": ");
        out.push_str(&value);
        out.push_str(if last { "\n" } else { ",\n" });
    };
    field(
        "final_moving_avg_accept_len",
        ff(s.final_moving_avg_accept_len, "summary.final_moving_avg_accept_len")?,
        false,
    );
    field("mean_throughput", ff(s.mean_throughput, "summary.mean_throughput")?, false);
    field("total_sim_time", ff(s.total_sim_time, "summary.total_sim_time")?, false);
    field("syncs", s.syncs.to_string(), false);
    field("drops", s.drops.to_string(), false);
    field("mean_staleness", ff(s.mean_staleness, "summary.mean_staleness")?, false);
    field("total_sync_time", ff(s.total_sync_time, "summary.total_sync_time")?, false);
    field("stale_pushes", s.stale_pushes.to_string(), false);
    field("learner_sim_time", ff(s.learner_sim_time, "summary.learner_sim_time")?, false);
    field("sync_interval_requests", s.sync_interval_requests.to_string(), false);
    field("run_seed", s.run_seed.to_string(), false);
    field("mode", json_str(&s.mode), false);
    field("loss_direction", json_str(&s.loss_direction), true);
    out.push_str("}\n");
    Ok(out)
}

/// Canonical JSON for arbitrary serializable values: keys sorted
/// (serde_json's default map is ordered), integers plain, floats through
/// [`fmt_float`]. Used for `traces.jsonl`.
fn canonical_value(v: &serde_json::Value, out: &mut String) -> Result<()> {
    match v {
        serde_json::Value::Null => out.push_str("null"),
        serde_json::Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().ok_or_else(|| {
                    Error::NonFinite(format!("unrepresentable number {n} in trace record"))
                })?;
                out.push_str(&ff(f, "trace float")?);
            }
        }
        serde_json::Value::String(s) => out.push_str(&json_str(s)),
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical_value(item, out)?;
            }
            out.push(']');
        }
        serde_json::Value::Object(map) => {
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&json_str(k));
                out.push(':');
                canonical_value(item, out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

/// One `traces.jsonl` line.
pub fn trace_line(record: &TraceRecord) -> Result<String> {
    let value = serde_json::to_value(record)?;
    let mut out = String::new();
    canonical_value(&value, &mut out)?;
    Ok(out)
}

/// Streaming `traces.jsonl` writer; pass `|r| sink.write(r)` as the
/// orchestrator's trace sink so records hit disk as they are produced.
pub struct TraceFileSink {
    writer: BufWriter<fs::File>,
    pub written: u64,
}

impl TraceFileSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(TraceFileSink { writer: BufWriter::new(fs::File::create(path)?), written: 0 })
    }

    pub fn write(&mut self, record: &TraceRecord) -> Result<()> {
        let line = trace_line(record)?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        self.writer.flush()?;
        Ok(self.written)
    }
}

/// One sweep result row for `sweep.csv`.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub final_moving_avg_accept_len: f64,
    pub mean_throughput: f64,
    pub total_sim_time: f64,
    pub total_sync_time: f64,
    pub syncs: u64,
    pub final_loss_total: f64,
    pub final_loss_accept: f64,
    pub final_loss_discard: f64,
    pub final_loss_ntp: f64,
}

impl SweepRow {
    pub fn from_run(param: &str, value: &str, r: &RunResult) -> SweepRow {
        let last = r.learner_steps.last();
        SweepRow {
            param: param.to_string(),
            value: value.to_string(),
            final_moving_avg_accept_len: r.summary.final_moving_avg_accept_len,
            mean_throughput: r.summary.mean_throughput,
            total_sim_time: r.summary.total_sim_time,
            total_sync_time: r.summary.total_sync_time,
            syncs: r.summary.syncs,
            final_loss_total: last.map_or(0.0, |m| m.loss_total),
            final_loss_accept: last.map_or(0.0, |m| m.loss_accept),
            final_loss_discard: last.map_or(0.0, |m| m.loss_discard),
            final_loss_ntp: last.map_or(0.0, |m| m.loss_ntp),
        }
    }
}

pub const SWEEP_CSV_HEADER: &str = concat!(
    "param,value,final_moving_avg_accept_len,mean_throughput,total_sim_time,",
    "total_sync_time,syncs,final_loss_total,final_loss_accept,final_loss_discard,",
    "final_loss_ntp"
);

/// Render `sweep.csv` (header + one line per row).
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let csv_field = |s: &str| {
            if s.contains(',') || s.contains('"') || s.contains('\n') {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            csv_field(&r.param),
            csv_field(&r.value),
            ff(r.final_moving_avg_accept_len, "sweep.final_moving_avg_accept_len")?,
            ff(r.mean_throughput, "sweep.mean_throughput")?,
            ff(r.total_sim_time, "sweep.total_sim_time")?,
            ff(r.total_sync_time, "sweep.total_sync_time")?,
            r.syncs,
            ff(r.final_loss_total, "sweep.final_loss_total")?,
            ff(r.final_loss_accept, "sweep.final_loss_accept")?,
            ff(r.final_loss_discard, "sweep.final_loss_discard")?,
            ff(r.final_loss_ntp, "sweep.final_loss_ntp")?,
        ));
    }
    Ok(out)
}

/// Write `metrics.jsonl`, `learner.jsonl`, and `summary.json` into
/// `out_dir` (created if missing).
pub fn write_run_outputs(out_dir: &Path, result: &RunResult) -> Result<()> {
    fs::create_dir_all(out_dir)?;

    let mut metrics = BufWriter::new(fs::File::create(out_dir.join("metrics.jsonl"))?);
    for row in &result.rows {
        metrics.write_all(metrics_line(row)?.as_bytes())?;
        metrics.write_all(b"\n")?;
    }
    metrics.flush()?;

    let mut learner = BufWriter::new(fs::File::create(out_dir.join("learner.jsonl"))?);
    for m in &result.learner_steps {
        learner.write_all(learner_line(m)?.as_bytes())?;
        learner.write_all(b"\n")?;
    }
    learner.flush()?;

    fs::write(out_dir.join("summary.json"), summary_json(&result.summary)?)?;
    Ok(())
}
