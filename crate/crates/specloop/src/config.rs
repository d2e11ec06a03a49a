//! Experiment configuration: a single TOML file with dotted-path overrides.
//!
//! Every section has defaults, unknown keys are rejected, and all
//! cross-field rules are checked up front by [`ExperimentConfig::validate`],
//! which reports every problem at once. Overrides (`--set a.b.c=value`) are
//! applied to the parsed TOML tree before deserialization, so they go
//! through exactly the same schema checks as the file itself.
//!
//! A nonzero `run.seed` is folded into the model, drafter, and traffic
//! seeds, giving one knob that moves the whole world for multi-seed studies.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::learner::{LearnerConfig, LossConfig};
use crate::loss::KlDirection;
use crate::model::{domain_token_range, mix_seed, TargetConfig};
use crate::sim::{CostModel, SyncPolicy};
use crate::traffic::{DomainSpec, StreamMode};

/// Execution mode of the training–serving loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    /// Discrete-event interleaving on the simulated clock; byte-identical
    /// outputs for identical (config, seed).
    Deterministic,
    /// Real producer/consumer threads; statistical guarantees only.
    Threaded,
}

impl ExecMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExecMode::Deterministic => "deterministic",
            ExecMode::Threaded => "threaded",
        }
    }
}

/// How the serving drafter starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrafterInit {
    /// All-zero weights (uniform proposals) — the day-0 scratch drafter.
    #[serde(alias = "scratch")]
    Zeros,
    /// Uniform random weights in `±init_scale`.
    Random,
    /// Load a snapshot from `drafter.checkpoint`.
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// 0 leaves section seeds untouched; anything else perturbs all of them.
    pub seed: u64,
    pub mode: ExecMode,
    /// When false, requests are served by plain greedy decoding (the
    /// no-speculation baseline).
    pub speculation: bool,
    /// Window for the moving-average acceptance-length series.
    pub moving_avg_window: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            mode: ExecMode::Deterministic,
            speculation: true,
            moving_avg_window: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrafterSection {
    pub init: DrafterInit,
    /// Snapshot path; required when `init = "pretrained"`.
    pub checkpoint: Option<PathBuf>,
    /// Condition the drafter on the target's hidden features.
    pub use_hidden: bool,
    /// Weight range for `init = "random"`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for DrafterSection {
    fn default() -> Self {
        DrafterSection {
            init: DrafterInit::Zeros,
            checkpoint: None,
            use_hidden: false,
            init_scale: 0.1,
            seed: 123,
        }
    }
}

/// Loss selection: either a named preset (`variant`) or explicit fields;
/// explicit fields override the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// One of `fkl`, `rkl`, `rkl_ntp`, `rkl_discard`.
    pub variant: Option<String>,
    pub direction: Option<KlDirection>,
    pub ntp_enabled: Option<bool>,
    pub discard_enabled: Option<bool>,
    pub lambda_discard: Option<f64>,
    pub discard_topk: Option<usize>,
}

impl LossSection {
    /// Resolve preset + overrides into a concrete [`LossConfig`].
    pub fn resolve(&self) -> Result<LossConfig> {
        let mut cfg = match self.variant.as_deref() {
            None => LossConfig::default(),
            Some("fkl") => LossConfig { direction: KlDirection::Forward, ..LossConfig::default() },
            Some("rkl") => LossConfig { direction: KlDirection::Reverse, ..LossConfig::default() },
            Some("rkl_ntp") => LossConfig {
                direction: KlDirection::Reverse,
                ntp_enabled: true,
                ..LossConfig::default()
            },
            Some("rkl_discard") => LossConfig {
                direction: KlDirection::Reverse,
                discard_enabled: true,
                ..LossConfig::default()
            },
            Some(other) => {
                return Err(Error::InvalidConfig {
                    issues: vec![format!(
                        "loss.variant '{other}' is not one of fkl, rkl, rkl_ntp, rkl_discard"
                    )],
                })
            }
        };
        if let Some(d) = self.direction {
            cfg.direction = d;
        }
        if let Some(b) = self.ntp_enabled {
            cfg.ntp_enabled = b;
        }
        if let Some(b) = self.discard_enabled {
            cfg.discard_enabled = b;
        }
        if let Some(l) = self.lambda_discard {
            cfg.lambda_discard = l;
        }
        if let Some(k) = self.discard_topk {
            cfg.discard_topk = k;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub enabled: bool,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    /// Records per training step; partial batches are never trained on.
    pub micro_batch: usize,
    pub buffer_capacity: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            enabled: true,
            base_lr: 0.05,
            warmup_steps: 400,
            clip_norm: 0.5,
            weight_decay: 0.0,
            micro_batch: 8,
            buffer_capacity: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    /// Keep this many entries per stored target distribution; 0 stores the
    /// full dense vector.
    pub compress_top_k: usize,
    /// Restrict payloads to the first N tokens of the vocabulary; 0 keeps
    /// the full vocabulary.
    pub draft_vocab_size: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        TraceSection { compress_top_k: 0, draft_vocab_size: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficSection {
    pub mode: StreamMode,
    pub seed: u64,
    pub requests_per_domain: usize,
    /// Domains to include; omitted means all of them.
    pub domains: Option<Vec<usize>>,
    /// Inclusive [min, max] prompt length.
    pub prompt_len: [usize; 2],
    /// Inclusive [min, max] output budget.
    pub max_output: [usize; 2],
    /// Truncate the stream to this many requests; 0 keeps everything.
    pub limit: usize,
}

impl Default for TrafficSection {
    fn default() -> Self {
        TrafficSection {
            mode: StreamMode::Mixed,
            seed: 99,
            requests_per_domain: 4000,
            domains: None,
            prompt_len: [2, 6],
            max_output: [16, 48],
            limit: 0,
        }
    }
}

/// The full experiment description.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub model: TargetConfig,
    pub drafter: DrafterSection,
    pub engine: EngineConfig,
    pub loss: LossSection,
    pub train: TrainSection,
    pub sync: SyncPolicy,
    pub cost: CostModel,
    pub trace: TraceSection,
    pub traffic: TrafficSection,
}

/// One `--set` override: a dotted path and a TOML value.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: toml::Value,
}

impl Override {
    /// Parse a `key.path=value` argument. The value is interpreted as TOML
    /// (so numbers, booleans, arrays, and quoted strings work); anything
    /// that does not parse as TOML is taken as a bare string.
    pub fn parse(arg: &str) -> Result<Override> {
        let (path, raw) = arg.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("override '{arg}' must look like key.path=value"))
        })?;
        let path = path.trim();
        if path.is_empty() {
            return Err(Error::InvalidArgument(format!("override '{arg}' has an empty key path")));
        }
        let value = parse_toml_value(raw.trim());
        Ok(Override { path: path.to_string(), value })
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Holder {
        v: toml::Value,
    }
    match toml::from_str::<Holder>(&format!("v = {raw}")) {
        Ok(h) => h.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Insert `value` at `dotted` inside the TOML tree, creating intermediate
/// tables as needed.
fn apply_override(root: &mut toml::Table, dotted: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("override path '{dotted}' is malformed")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "override path '{dotted}' descends through non-table key '{part}'"
            ))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse a TOML string, apply overrides, and validate.
    pub fn from_toml_str(text: &str, overrides: &[Override]) -> Result<Self> {
        let mut tree: toml::Table = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig { issues: vec![e.to_string()] })?;
        for o in overrides {
            apply_override(&mut tree, &o.path, o.value.clone())?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e| Error::InvalidConfig { issues: vec![e.to_string()] })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a config file with overrides.
    pub fn from_path(path: &Path, overrides: &[Override]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig { issues: vec![format!("cannot read {}: {e}", path.display())] }
        })?;
        Self::from_toml_str(&text, overrides)
    }

    /// All cross-field checks, every issue reported.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let v = self.model.vocab_size;

        if v < 2 {
            issues.push(format!("model.vocab_size must be >= 2, got {v}"));
        }
        if self.model.num_domains == 0 {
            issues.push("model.num_domains must be >= 1".to_string());
        } else if v >= 2 && self.model.num_domains > v / 2 {
            issues.push(format!(
                "model.num_domains {} too large for vocab {v} (blocks need >= 2 tokens)",
                self.model.num_domains
            ));
        }
        if !(0.0..1.0).contains(&self.model.noise) {
            issues.push(format!("model.noise must be in [0, 1), got {}", self.model.noise));
        }
        if !(0.0..=1.0).contains(&self.model.coherence) {
            issues.push(format!("model.coherence must be in [0, 1], got {}", self.model.coherence));
        }
        if self.model.num_domains > 0 && v >= 2 {
            let min_block = (0..self.model.num_domains)
                .map(|d| domain_token_range(v, self.model.num_domains, d).len())
                .min()
                .unwrap_or(0);
            if self.model.sparsity == 0 || self.model.sparsity > min_block {
                issues.push(format!(
                    "model.sparsity must be in 1..={min_block} for this vocab/domain split, got {}",
                    self.model.sparsity
                ));
            }
        }

        if let Err(Error::InvalidConfig { issues: mut e }) = engine_issues(&self.engine, v) {
            issues.append(&mut e);
        }
        match self.loss.resolve() {
            Ok(loss) => {
                if let Err(e) = loss.validate(v) {
                    issues.push(e.to_string());
                }
            }
            Err(Error::InvalidConfig { issues: mut e }) => issues.append(&mut e),
            Err(e) => issues.push(e.to_string()),
        }

        if !(self.train.base_lr > 0.0) || !self.train.base_lr.is_finite() {
            issues.push(format!("train.base_lr must be finite and > 0, got {}", self.train.base_lr));
        }
        if self.train.micro_batch == 0 {
            issues.push("train.micro_batch must be >= 1".to_string());
        }
        if self.train.buffer_capacity < self.train.micro_batch.max(1) {
            issues.push(format!(
                "train.buffer_capacity {} cannot hold a micro-batch of {}",
                self.train.buffer_capacity, self.train.micro_batch
            ));
        }
        for (name, val) in [
            ("train.clip_norm", self.train.clip_norm),
            ("train.weight_decay", self.train.weight_decay),
        ] {
            if !val.is_finite() || val < 0.0 {
                issues.push(format!("{name} must be finite and >= 0, got {val}"));
            }
        }

        if let Err(Error::InvalidConfig { issues: mut e }) = self.sync.validate() {
            issues.append(&mut e);
        }
        if let Err(Error::InvalidConfig { issues: mut e }) = self.cost.validate() {
            issues.append(&mut e);
        }

        if self.trace.compress_top_k > v {
            issues.push(format!(
                "trace.compress_top_k {} exceeds vocab {v}",
                self.trace.compress_top_k
            ));
        }
        if self.trace.draft_vocab_size > v {
            issues.push(format!(
                "trace.draft_vocab_size {} exceeds vocab {v}",
                self.trace.draft_vocab_size
            ));
        }

        if self.drafter.init == DrafterInit::Pretrained && self.drafter.checkpoint.is_none() {
            issues.push("drafter.checkpoint is required when drafter.init = \"pretrained\"".into());
        }
        if !self.drafter.init_scale.is_finite() || self.drafter.init_scale < 0.0 {
            issues.push(format!(
                "drafter.init_scale must be finite and >= 0, got {}",
                self.drafter.init_scale
            ));
        }

        if self.run.moving_avg_window == 0 {
            issues.push("run.moving_avg_window must be >= 1".to_string());
        }

        if self.traffic.requests_per_domain == 0 {
            issues.push("traffic.requests_per_domain must be >= 1".to_string());
        }
        if self.traffic.prompt_len[0] < 2 || self.traffic.prompt_len[0] > self.traffic.prompt_len[1]
        {
            issues.push(format!(
                "traffic.prompt_len must satisfy 2 <= min <= max, got {:?}",
                self.traffic.prompt_len
            ));
        }
        if self.traffic.max_output[0] < 1 || self.traffic.max_output[0] > self.traffic.max_output[1]
        {
            issues.push(format!(
                "traffic.max_output must satisfy 1 <= min <= max, got {:?}",
                self.traffic.max_output
            ));
        }
        if let Some(domains) = &self.traffic.domains {
            if domains.is_empty() {
                issues.push("traffic.domains must not be empty when present".to_string());
            }
            for &d in domains {
                if d >= self.model.num_domains {
                    issues.push(format!(
                        "traffic.domains entry {d} out of range (< {})",
                        self.model.num_domains
                    ));
                }
            }
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }

    /// Model generation parameters with the run seed folded in.
    pub fn model_config(&self) -> TargetConfig {
        let mut m = self.model.clone();
        m.seed = self.fold(m.seed, 1);
        m
    }

    pub fn drafter_seed(&self) -> u64 {
        self.fold(self.drafter.seed, 2)
    }

    pub fn traffic_seed(&self) -> u64 {
        self.fold(self.traffic.seed, 3)
    }

    fn fold(&self, base: u64, salt: u64) -> u64 {
        if self.run.seed == 0 {
            base
        } else {
            mix_seed(base, self.run.seed, salt)
        }
    }

    /// Domain specs for the configured traffic.
    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        let ids: Vec<usize> = match &self.traffic.domains {
            Some(d) => d.clone(),
            None => (0..self.model.num_domains).collect(),
        };
        crate::traffic::uniform_domains(
            &ids,
            self.traffic.requests_per_domain,
            (self.traffic.prompt_len[0], self.traffic.prompt_len[1]),
            (self.traffic.max_output[0], self.traffic.max_output[1]),
        )
    }

    /// Restricted payload vocabulary, when configured.
    pub fn draft_vocab(&self) -> Option<Vec<u32>> {
        if self.trace.draft_vocab_size == 0 {
            None
        } else {
            Some((0..self.trace.draft_vocab_size as u32).collect())
        }
    }

    /// Learner settings implied by this config.
    pub fn learner_config(&self) -> Result<LearnerConfig> {
        Ok(LearnerConfig {
            loss: self.loss.resolve()?,
            base_lr: self.train.base_lr,
            warmup_steps: self.train.warmup_steps,
            clip_norm: self.train.clip_norm,
            weight_decay: self.train.weight_decay,
            draft_vocab: self.draft_vocab(),
        })
    }
}

fn engine_issues(engine: &EngineConfig, vocab: usize) -> Result<()> {
    match engine.validate(vocab) {
        Ok(()) => Ok(()),
        Err(e) => Err(Error::InvalidConfig { issues: vec![e.to_string()] }),
    }
}
