//! `specloop` — experiment runner for the speculative-decoding
//! serve-and-train simulator.
//!
//! Subcommands:
//!
//! * `run` — run one experiment config, write `metrics.jsonl`,
//!   `learner.jsonl`, `summary.json` (and optionally `traces.jsonl`).
//! * `sweep` — run the same config once per value of one parameter and
//!   emit a comparison `sweep.csv`.
//! * `analytics` — print the closed-form expected-accept-length/speedup
//!   table for a grid of (alpha, gamma) at a fixed draft/target cost ratio.
//! * `pretrain` — train a drafter offline on the configured stream and save
//!   the resulting snapshot for use as `drafter.init = "pretrained"`.
//!
//! Exit codes: 0 success, 2 usage/config errors, 1 runtime integrity errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use specloop::analytics::{expected_accept_length, expected_speedup};
use specloop::config::{ExperimentConfig, Override};
use specloop::error::{Error, Result};
use specloop::orchestrator::{pretrain, run_experiment};
use specloop::output::{
    fmt_float, summary_json, sweep_csv, write_run_outputs, SweepRow, TraceFileSink,
};

#[derive(Parser)]
#[command(
    name = "specloop",
    version,
    about = "Speculative-decoding serving/training loop simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write its output files.
    Run(RunArgs),
    /// Run one experiment per value of a swept parameter; write sweep.csv.
    Sweep(SweepArgs),
    /// Print the closed-form accept-length / speedup table.
    Analytics(AnalyticsArgs),
    /// Train a drafter offline and save its snapshot.
    Pretrain(PretrainArgs),
}

/// Flags shared by every config-driven subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// Path to the experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path config override, e.g. `--set sync.interval_requests=80`
    /// (repeatable; later flags win).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set run.mode=...` (deterministic | threaded).
    #[arg(long)]
    mode: Option<String>,
    /// Shorthand for `--set run.seed=...`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// Assemble the override list: `--set` flags in order, then the
    /// shorthands (so the shorthands always win).
    fn overrides(&self, extra: &[String]) -> Result<Vec<Override>> {
        let mut raw: Vec<String> = self.set.clone();
        raw.extend_from_slice(extra);
        if let Some(mode) = &self.mode {
            raw.push(format!("run.mode={mode}"));
        }
        if let Some(seed) = self.seed {
            raw.push(format!("run.seed={seed}"));
        }
        raw.iter().map(|s| Override::parse(s)).collect()
    }

    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        ExperimentConfig::from_path(&self.config, &self.overrides(extra)?)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory for metrics.jsonl / learner.jsonl / summary.json.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Also stream every verification-step trace record to traces.jsonl.
    #[arg(long)]
    dump_traces: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dotted config path to sweep, e.g. `sync.interval_requests`.
    #[arg(long)]
    param: String,
    /// Comma-separated values for the swept parameter.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Directory for per-value run outputs and sweep.csv.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyticsArgs {
    /// Comma-separated per-token acceptance rates.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
    alpha: Vec<f64>,
    /// Comma-separated lookahead depths.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,8,10")]
    gamma: Vec<u32>,
    /// Draft-step / target-step cost ratio.
    #[arg(long, default_value_t = 0.0)]
    cost_ratio: f64,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Where to save the trained drafter snapshot (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.cfg.load(&[])?;
    std::fs::create_dir_all(&args.out_dir)?;
    let result = if args.dump_traces {
        let mut sink = TraceFileSink::create(&args.out_dir.join("traces.jsonl"))?;
        let mut write = |r: &specloop::trace::TraceRecord| sink.write(r);
        let result = run_experiment(&cfg, Some(&mut write))?;
        let written = sink.finish()?;
        log::info!("wrote {written} trace records");
        result
    } else {
        run_experiment(&cfg, None)?
    };
    write_run_outputs(&args.out_dir, &result)?;
    print!("{}", summary_json(&result.summary)?);
    eprintln!(
        "wrote {} requests to {}",
        result.rows.len(),
        args.out_dir.display()
    );
    Ok(())
}

/// Filesystem-safe directory name for one sweep point.
fn sweep_dir_name(param: &str, value: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect()
    };
    format!("{}={}", clean(param), clean(value))
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let mut rows = Vec::new();
    for value in &args.values {
        let cfg = args.cfg.load(&[format!("{}={}", args.param, value)])?;
        let result = run_experiment(&cfg, None)?;
        let sub = args.out_dir.join(sweep_dir_name(&args.param, value));
        write_run_outputs(&sub, &result)?;
        rows.push(SweepRow::from_run(&args.param, value, &result));
    }
    let csv = sweep_csv(&rows)?;
    std::fs::write(args.out_dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_analytics(args: &AnalyticsArgs) -> Result<()> {
    println!("alpha,gamma,cost_ratio,expected_accept_len,expected_speedup");
    for &alpha in &args.alpha {
        for &gamma in &args.gamma {
            let el = expected_accept_length(alpha, gamma)?;
            let sp = expected_speedup(alpha, gamma, args.cost_ratio)?;
            println!(
                "{},{},{},{},{}",
                fmt_float(alpha),
                gamma,
                fmt_float(args.cost_ratio),
                fmt_float(el),
                fmt_float(sp)
            );
        }
    }
    Ok(())
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = args.cfg.load(&[])?;
    let result = pretrain(&cfg)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    result.final_snapshot.save(&args.out)?;
    println!(
        "{{\"snapshot\":{},\"version\":{},\"final_moving_avg_accept_len\":{}}}",
        serde_json::to_string(&args.out.display().to_string())?,
        result.final_snapshot.version,
        fmt_float(result.summary.final_moving_avg_accept_len)
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Analytics(a) => cmd_analytics(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
