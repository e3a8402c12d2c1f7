//! Experiment configuration: a TOML file, `--set key=value` overrides, and
//! defaults for every field.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use flowpolicy::critic::CriticConfig;
use flowpolicy::data::SwissRollTask;
use flowpolicy::likelihood::TraceMode;
use flowpolicy::matching::MatchingConfig;
use flowpolicy::model::ModelConfig;
use flowpolicy::numerics::Activation;
use flowpolicy::policy::{GmpgVariant, TrainConfig, WeightMode};
use flowpolicy::sampler::{Scheme, SolverSpec};
use serde::{Deserialize, Serialize};

/// Error in the configuration itself (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    TiltedBandit { dims: usize, beta: f64, n: usize },
    SwissRoll { n: usize, noise: f64, scale: f64 },
    TabularChain { states: usize, n: usize },
    File { path: PathBuf },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::TiltedBandit { dims: 1, beta: 1.0, n: 10_000 }
    }
}

impl TaskConfig {
    pub fn swiss_roll(&self, seed: u64) -> Option<SwissRollTask> {
        match *self {
            TaskConfig::SwissRoll { n, noise, scale } => Some(SwissRollTask { n, noise, scale, seed, ..Default::default() }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    /// Implicit Q-learning on the dataset.
    Iql,
    /// Closed-form critic of the tilted bandit: `Q = Σa`, `V = β·dims/2`.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticBlock {
    pub kind: CriticKind,
    pub tau: f64,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for CriticBlock {
    fn default() -> Self {
        let c = CriticConfig::default();
        Self {
            kind: CriticKind::Iql,
            tau: c.tau,
            gamma: c.gamma,
            hidden: vec![64, 64],
            activation: c.activation,
            lr: 1e-3,
            steps: 3000,
            batch_size: c.batch_size,
        }
    }
}

impl CriticBlock {
    pub fn iql(&self) -> CriticConfig {
        CriticConfig {
            tau: self.tau,
            gamma: self.gamma,
            hidden: self.hidden.clone(),
            activation: self.activation,
            lr: self.lr,
            steps: self.steps,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyScheme {
    Gmpo,
    Gmpg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyBlock {
    /// Scheme used by `eval`/`sample` when `--checkpoint policy` is given.
    pub scheme: PolicyScheme,
    pub beta: f64,
    pub weight: WeightMode,
    pub gmpo_train: TrainConfig,
    pub gmpg_variant: GmpgVariant,
    pub gmpg_solver: SolverSpec,
    pub gmpg_trace: TraceMode,
    pub gmpg_train: TrainConfig,
}

impl Default for PolicyBlock {
    fn default() -> Self {
        Self {
            scheme: PolicyScheme::Gmpo,
            beta: 1.0,
            weight: WeightMode::default(),
            gmpo_train: TrainConfig::default(),
            gmpg_variant: GmpgVariant::Dynamic,
            gmpg_solver: SolverSpec { scheme: Scheme::Midpoint, steps: 16 },
            gmpg_trace: TraceMode::Exact,
            gmpg_train: TrainConfig { steps: 200, batch_size: 512, lr: 1e-3, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodBlock {
    pub solver: SolverSpec,
    pub trace: TraceMode,
}

impl Default for LikelihoodBlock {
    fn default() -> Self {
        Self { solver: SolverSpec { scheme: Scheme::Rk4_38, steps: 100 }, trace: TraceMode::Exact }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub samples: usize,
    pub trajectories: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self { samples: 4096, trajectories: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    /// Relative paths are resolved against the output root.
    pub dir: PathBuf,
    /// Keep every n-th metrics row (the last row is always kept).
    pub metrics_every: usize,
    /// `csv` or `binary`.
    pub dataset_format: String,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("run"), metrics_every: 1, dataset_format: "csv".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub matching: MatchingConfig,
    pub critic: CriticBlock,
    pub pretrain: TrainConfig,
    pub policy: PolicyBlock,
    /// Solver used to act, sample and export trajectories.
    pub solver: SolverSpec,
    pub likelihood: LikelihoodBlock,
    pub eval: EvalBlock,
    pub output: OutputBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskConfig::default(),
            model: ModelConfig { hidden: vec![64, 64], time_embed_width: 16, ..Default::default() },
            matching: MatchingConfig::default(),
            critic: CriticBlock::default(),
            pretrain: TrainConfig::default(),
            policy: PolicyBlock::default(),
            solver: SolverSpec { scheme: Scheme::Euler, steps: 32 },
            likelihood: LikelihoodBlock::default(),
            eval: EvalBlock::default(),
            output: OutputBlock::default(),
        }
    }
}

/// Parses the value side of `key=value` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, value) = spec.split_once('=').ok_or_else(|| config_err(format!("override '{spec}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| config_err(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        let bad = |m: String| Err(config_err(m));
        self.model.schedule.validate().map_err(|e| config_err(e.to_string()))?;
        self.matching
            .validate(self.model.schedule, self.model.parameterization)
            .map_err(|e| config_err(e.to_string()))?;
        for (name, t) in [("pretrain", &self.pretrain), ("policy.gmpo_train", &self.policy.gmpo_train), ("policy.gmpg_train", &self.policy.gmpg_train)] {
            t.validate().map_err(|e| config_err(format!("{name}: {e}")))?;
        }
        self.policy.weight.validate().map_err(|e| config_err(e.to_string()))?;
        if !(self.critic.tau > 0.0 && self.critic.tau < 1.0) || self.critic.batch_size == 0 {
            return bad("critic.tau must lie in (0, 1) and critic.batch_size must be positive".into());
        }
        if !(self.policy.beta >= 0.0 && self.policy.beta.is_finite()) {
            return bad(format!("policy.beta must be non-negative, got {}", self.policy.beta));
        }
        for (name, s) in [("solver", &self.solver), ("policy.gmpg_solver", &self.policy.gmpg_solver), ("likelihood.solver", &self.likelihood.solver)] {
            if s.steps == 0 {
                return bad(format!("{name}.steps must be positive"));
            }
        }
        if self.output.metrics_every == 0 {
            return bad("output.metrics_every must be positive".into());
        }
        if !matches!(self.output.dataset_format.as_str(), "csv" | "binary") {
            return bad(format!("output.dataset_format must be csv or binary, got '{}'", self.output.dataset_format));
        }
        if self.critic.kind == CriticKind::Analytic && !matches!(self.task, TaskConfig::TiltedBandit { .. }) {
            return bad("critic.kind = analytic is only defined for the tilted bandit".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }

    /// Output directory under `root` (absolute `output.dir` wins).
    pub fn output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output.dir.is_relative() => r.join(&self.output.dir),
            _ => self.output.dir.clone(),
        }
    }
}

pub fn ensure(cond: bool, msg: impl Into<String>) -> anyhow::Result<()> {
    if cond {
        Ok(())
    } else {
        bail!(ConfigError(msg.into()))
    }
}

pub fn missing(what: &str, path: &Path, stage: &str) -> anyhow::Error {
    anyhow!(ConfigError(format!("{what} {} not found; run `{stage}` first", path.display())))
}
