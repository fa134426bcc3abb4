//! TOML experiment configuration.
//!
//! ```toml
//! recipe = "online_vs_offline"
//! seed = 7
//!
//! [data]
//! family = "two_rings"
//! n = 512
//! n_test = 512
//! d = 2
//! p = 2
//! noise = 0.15
//!
//! [teacher]
//! layer_widths = [2, 128, 128, 2]
//! activation = "relu"
//!
//! [student]
//! layer_widths = [2, 4, 2]
//! activation = "relu"
//!
//! [train]
//! epochs = 20
//! lr = 0.05
//!
//! [params]
//! num_seeds = 3
//! kd_loss = { kind = "kd_ce", tau = 4.0 }
//! ```
//!
//! `[teacher_train]` overrides `[train]` for teacher runs; every other key of
//! `[params]` has a default.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{Family, SyntheticSpec};
use crate::distill::{LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Activation, Init, MlpSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    ComplexityCurve,
    OnlineVsOffline,
    TemperatureSweep,
    NtkSimilarity,
    BoundCheck,
    CheckpointFrequency,
    AlphaSweep,
}

impl Recipe {
    pub const ALL: [Recipe; 7] = [
        Recipe::ComplexityCurve,
        Recipe::OnlineVsOffline,
        Recipe::TemperatureSweep,
        Recipe::NtkSimilarity,
        Recipe::BoundCheck,
        Recipe::CheckpointFrequency,
        Recipe::AlphaSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::ComplexityCurve => "complexity_curve",
            Recipe::OnlineVsOffline => "online_vs_offline",
            Recipe::TemperatureSweep => "temperature_sweep",
            Recipe::NtkSimilarity => "ntk_similarity",
            Recipe::BoundCheck => "bound_check",
            Recipe::CheckpointFrequency => "checkpoint_frequency",
            Recipe::AlphaSweep => "alpha_sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub family: Family,
    /// Training examples.
    pub n: usize,
    pub n_test: usize,
    /// Number of classes.
    pub d: usize,
    /// Input dimension.
    pub p: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub init: Init,
}

impl NetConfig {
    pub fn spec(&self, seed: u64) -> MlpSpec {
        MlpSpec {
            layer_widths: self.layer_widths.clone(),
            activation: self.activation,
            init: self.init,
            seed,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layer_widths.last().copied().unwrap_or(0)
    }
}

/// Trainer settings without the seed, which is derived per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Defaults to `min(128, n/4)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub warmup_epochs: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

impl TrainSection {
    pub fn to_train_config(&self, n: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::with_defaults(n, self.epochs, self.lr, seed);
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.momentum = self.momentum;
        cfg.nesterov = self.nesterov;
        cfg.schedule = self.schedule.clone();
        cfg.warmup_epochs = self.warmup_epochs;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeParams {
    /// Temperature of soft teacher targets in complexity and similarity recipes.
    pub tau: f64,
    /// Distillation loss of KD students.
    pub kd_loss: LossKind,
    /// Loss of students trained on labels only.
    pub student_loss: LossKind,
    pub num_seeds: usize,
    /// Student epochs at which complexities are measured (0 is initialization);
    /// empty means every epoch.
    pub eval_epochs: Vec<usize>,
    /// Held-out examples the complexity kernel is built on.
    pub complexity_examples: usize,
    /// Teacher epochs averaged for the averaged-teacher target; 0 disables it.
    pub average_window: usize,
    pub taus: Vec<f64>,
    /// Student epoch for the temperature sweep; defaults to the last one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature_epoch: Option<usize>,
    pub num_probes: usize,
    pub similarity_examples: usize,
    pub trials: usize,
    pub delta: f64,
    /// Ridge regularization; defaults to `1e-8·trace(K)/order`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Also evaluate the distillation bound with a trained teacher.
    pub distillation_bound: bool,
    pub periods: Vec<usize>,
    pub alphas: Vec<f64>,
}

impl Default for RecipeParams {
    fn default() -> Self {
        Self {
            tau: 4.0,
            kd_loss: LossKind::KdCe { tau: 4.0 },
            student_loss: LossKind::Mse,
            num_seeds: 1,
            eval_epochs: Vec::new(),
            complexity_examples: 64,
            average_window: 0,
            taus: vec![1.0, 2.0, 4.0, 8.0],
            temperature_epoch: None,
            num_probes: 64,
            similarity_examples: 64,
            trials: 200,
            delta: 0.05,
            lambda: None,
            distillation_bound: true,
            periods: vec![1, 2, 4, 8],
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub teacher: NetConfig,
    pub student: NetConfig,
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_train: Option<TrainSection>,
    #[serde(default)]
    pub params: RecipeParams,
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        key: key.to_string(),
        message: message.into(),
    }
}

/// 1-based line and column of a byte offset.
fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(offset, |i| offset - i - 1) + 1;
    (line, col)
}

/// Header of the `[table]` whose body (or header line) contains `offset`.
fn enclosing_table(text: &str, offset: usize) -> Option<String> {
    let offset = offset.min(text.len());
    let line_end = text[offset..].find('\n').map_or(text.len(), |i| offset + i);
    text[..line_end].lines().rev().find_map(|l| {
        let t = l.trim();
        (t.starts_with('[') && t.ends_with(']')).then(|| t.trim_matches(|c| c == '[' || c == ']').trim().to_string())
    })
}

fn backticked(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    if let Err(e) = text.parse::<toml::Table>() {
        let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
        return Err(Error::Parse {
            line,
            column,
            message: e.message().trim().to_string(),
        });
    }
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let message = e.message().trim().to_string();
        let offset = e.span().map(|s| s.start);
        let field = match backticked(&message) {
            Some(f) if message.starts_with("unknown field") || message.starts_with("missing field") => Some(f),
            _ => None,
        };
        let table = offset.and_then(|o| enclosing_table(text, o));
        let key = match (table, field, offset) {
            (Some(t), Some(f), _) => format!("{t}.{f}"),
            (None, Some(f), _) => f.to_string(),
            (Some(t), None, _) => t,
            (None, None, Some(o)) => {
                let (line, column) = line_column(text, o);
                format!("line {line} column {column}")
            }
            (None, None, None) => String::new(),
        };
        invalid(&key, message)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Format(e.to_string()))
}

impl ExperimentConfig {
    pub fn teacher_train_section(&self) -> &TrainSection {
        self.teacher_train.as_ref().unwrap_or(&self.train)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        self.synthetic_spec_for(rng::derive_seed(self.seed, "data"))
    }

    pub fn synthetic_spec_for(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            family: self.data.family,
            n: self.data.n,
            d: self.data.d,
            p: self.data.p,
            noise: self.data.noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n == 0 {
            return Err(invalid("data.n", "must be positive"));
        }
        if d.n_test == 0 {
            return Err(invalid("data.n_test", "must be positive"));
        }
        if d.d < 2 {
            return Err(invalid("data.d", "need at least two classes"));
        }
        if d.p == 0 {
            return Err(invalid("data.p", "input dimension must be positive"));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return Err(invalid("data.noise", "must be finite and non-negative"));
        }
        if d.family == Family::TwoRings && d.p < 2 {
            return Err(invalid("data.p", "two_rings needs p >= 2"));
        }
        if d.family == Family::XorGrid && d.p < 2 {
            return Err(invalid("data.p", "xor_grid needs p >= 2"));
        }
        for (name, net) in [("teacher", &self.teacher), ("student", &self.student)] {
            let key = format!("{name}.layer_widths");
            if net.layer_widths.len() < 2 || net.layer_widths.contains(&0) {
                return Err(invalid(&key, "need at least two positive widths"));
            }
            if net.layer_widths[0] != d.p {
                return Err(invalid(&key, format!("input width {} differs from data.p = {}", net.layer_widths[0], d.p)));
            }
            let out = net.output_dim();
            if out != d.d && !(out == 1 && d.d == 2) {
                return Err(invalid(
                    &key,
                    format!("output width {out} must equal data.d = {} (or 1 for two classes)", d.d),
                ));
            }
        }
        if self.teacher.output_dim() != self.student.output_dim() {
            return Err(invalid("student.layer_widths", "teacher and student output widths differ"));
        }
        for (name, t) in [("train", Some(&self.train)), ("teacher_train", self.teacher_train.as_ref())] {
            let Some(t) = t else { continue };
            if t.epochs == 0 {
                return Err(invalid(&format!("{name}.epochs"), "must be positive"));
            }
            if !(t.lr > 0.0 && t.lr.is_finite()) {
                return Err(invalid(&format!("{name}.lr"), "must be positive"));
            }
            if t.batch_size == Some(0) {
                return Err(invalid(&format!("{name}.batch_size"), "must be positive"));
            }
            t.to_train_config(d.n, 0)
                .validate()
                .map_err(|e| invalid(&format!("{name}"), e.to_string()))?;
        }
        self.validate_params()
    }

    fn validate_params(&self) -> Result<()> {
        let p = &self.params;
        if !(p.tau > 0.0 && p.tau.is_finite()) {
            return Err(invalid("params.tau", "must be positive"));
        }
        p.kd_loss.validate().map_err(|e| invalid("params.kd_loss", e.to_string()))?;
        if !p.kd_loss.needs_teacher() {
            return Err(invalid("params.kd_loss", "must be a distillation loss"));
        }
        p.student_loss.validate().map_err(|e| invalid("params.student_loss", e.to_string()))?;
        if p.student_loss.needs_teacher() {
            return Err(invalid("params.student_loss", "must not need a teacher"));
        }
        if p.num_seeds == 0 {
            return Err(invalid("params.num_seeds", "must be positive"));
        }
        let epochs = self.train.epochs;
        if let Some(&e) = p.eval_epochs.iter().find(|&&e| e > epochs) {
            return Err(invalid("params.eval_epochs", format!("epoch {e} exceeds train.epochs = {epochs}")));
        }
        if p.eval_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("params.eval_epochs", "must be strictly increasing"));
        }
        let uses_complexity = matches!(self.recipe, Recipe::ComplexityCurve | Recipe::TemperatureSweep);
        if uses_complexity && (p.complexity_examples == 0 || p.complexity_examples > self.data.n_test) {
            return Err(invalid("params.complexity_examples", "must lie in 1..=data.n_test"));
        }
        if p.taus.is_empty() || p.taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(invalid("params.taus", "need at least one positive temperature"));
        }
        if p.temperature_epoch.is_some_and(|e| e > epochs) {
            return Err(invalid("params.temperature_epoch", "exceeds train.epochs"));
        }
        if p.num_probes < 2 {
            return Err(invalid("params.num_probes", "need at least 2 probes"));
        }
        let uses_similarity = self.recipe == Recipe::NtkSimilarity;
        if uses_similarity && (p.similarity_examples == 0 || p.similarity_examples > self.data.n) {
            return Err(invalid("params.similarity_examples", "must lie in 1..=data.n"));
        }
        if p.trials == 0 {
            return Err(invalid("params.trials", "must be positive"));
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(invalid("params.delta", "must lie in (0, 1)"));
        }
        if p.lambda.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return Err(invalid("params.lambda", "must be positive"));
        }
        if p.periods.is_empty() || p.periods.contains(&0) {
            return Err(invalid("params.periods", "need at least one positive period"));
        }
        if p.alphas.is_empty() || p.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(invalid("params.alphas", "need values in [0, 1]"));
        }
        if self.recipe == Recipe::BoundCheck && (self.data.d != 2 || self.student.output_dim() != 1) {
            return Err(invalid(
                "student.layer_widths",
                "bound_check needs a binary task and a single-output student",
            ));
        }
        Ok(())
    }
}
