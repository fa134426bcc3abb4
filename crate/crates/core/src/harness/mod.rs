//! Experiment harness: TOML configs, the recipes that reproduce the paper's
//! experiments at desk scale, and their CSV/JSON artifacts.
//!
//! A recipe is a pure function of its config. It returns a [`RunReport`]
//! holding named tables; [`emit`] writes each table to `<name>.csv` plus a
//! `report.json` summary, all atomically.

pub mod config;
mod recipes;
pub mod report;

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

pub use config::{parse_config, to_toml, DataConfig, ExperimentConfig, NetConfig, Recipe, RecipeParams, TrainSection};
pub use recipes::{bound_trial, train_teacher, BoundTrial, TeacherRun};
pub use report::{Cell, Table};

use crate::error::{Error, Result};

pub const SOFTWARE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone)]
pub struct RunReport {
    pub recipe: Recipe,
    /// SHA-256 of the canonical TOML of the config (without `out_dir`).
    pub config_digest: String,
    pub software_version: String,
    pub seed: u64,
    pub tables: Vec<Table>,
    /// Scalar findings of the recipe (orderings, counts, means).
    pub summary: BTreeMap<String, Value>,
}

impl RunReport {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            recipe: cfg.recipe,
            config_digest: config_digest(cfg)?,
            software_version: SOFTWARE_VERSION.to_string(),
            seed: cfg.seed,
            tables: Vec::new(),
            summary: BTreeMap::new(),
        })
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.summary.insert(key.to_string(), value.into());
    }

    pub fn note_float(&mut self, key: &str, value: f64) {
        self.summary.insert(key.to_string(), report::json_float(value));
    }

    pub fn to_json(&self) -> Value {
        let tables: serde_json::Map<String, Value> =
            self.tables.iter().map(|t| (t.name.clone(), report::table_to_json(t))).collect();
        serde_json::json!({
            "recipe": self.recipe.name(),
            "config_digest": self.config_digest,
            "software_version": self.software_version,
            "seed": self.seed,
            "summary": self.summary,
            "tables": tables,
        })
    }
}

pub fn config_digest(cfg: &ExperimentConfig) -> Result<String> {
    let mut canonical = cfg.clone();
    canonical.out_dir = None;
    let text = to_toml(&canonical)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Run the recipe named in the config.
pub fn run_recipe(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let wrap = |e: Error| Error::Recipe {
        recipe: cfg.recipe.name().to_string(),
        source: Box::new(e),
    };
    let mut report = RunReport::new(cfg)?;
    match cfg.recipe {
        Recipe::ComplexityCurve => recipes::complexity_curve(cfg, &mut report),
        Recipe::OnlineVsOffline => recipes::online_vs_offline(cfg, &mut report),
        Recipe::TemperatureSweep => recipes::temperature_sweep(cfg, &mut report),
        Recipe::NtkSimilarity => recipes::ntk_similarity(cfg, &mut report),
        Recipe::BoundCheck => recipes::bound_check(cfg, &mut report),
        Recipe::CheckpointFrequency => recipes::checkpoint_frequency(cfg, &mut report),
        Recipe::AlphaSweep => recipes::alpha_sweep(cfg, &mut report),
    }
    .map_err(wrap)?;
    Ok(report)
}

/// Train the first teacher of `cfg` and write its per-epoch checkpoints
/// (`teacher_epochNNNN.kdcl`), the datasets (`train.csv`, `test.csv`) and,
/// through the returned report, its metrics and a trajectory manifest.
pub fn train_teacher_artifacts(cfg: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let (train, test) = crate::data::make_split(&cfg.synthetic_spec(), cfg.data.n_test)?;
    let teacher = train_teacher(cfg, &train, &test, 0)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    train.write_csv(&dir.join("train.csv"))?;
    test.write_csv(&dir.join("test.csv"))?;
    let mut manifest = Table::new("teacher_trajectory", &["epoch", "step", "file"]);
    for c in &teacher.run.epoch_checkpoints {
        let file = format!("teacher_epoch{:04}.kdcl", c.epoch_index);
        crate::model::save(c, &dir.join(&file))?;
        manifest.push(vec![Cell::Int(c.epoch_index as i64), Cell::Int(c.step_index as i64), Cell::Text(file)]);
    }
    let mut report = RunReport::new(cfg)?;
    report.note_float("teacher_test_acc", teacher.run.final_test_acc().unwrap_or(f64::NAN));
    let mut metrics = teacher.run.metrics_table();
    metrics.name = "teacher_metrics".into();
    report.tables.push(metrics);
    report.tables.push(manifest);
    Ok(report)
}

pub fn emit_csv(table: &Table, path: &Path) -> Result<()> {
    table.write_csv(path)
}

/// Write every table as `<dir>/<name>.csv` and the summary as `<dir>/report.json`.
pub fn emit(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in &report.tables {
        emit_csv(t, &dir.join(format!("{}.csv", t.name)))?;
    }
    report::write_json(&dir.join("report.json"), &report.to_json())
}
