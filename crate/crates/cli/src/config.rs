//! Run configuration: one JSON document with six sections, every field
//! optional. Each leaf is also reachable as a `--<section>-<field>` flag.

use std::fs;
use std::path::{Path, PathBuf};

use dalip_core::mixlaw::FitOptions;
use dalip_core::objective::{DalipObjectiveConfig, Reduction, DEFAULT_TAU};
use dalip_core::synthdata::SyntheticDatasetSpec;
use dalip_core::twintower::{AdamConfig, Matching, ObjectiveKind, TowerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Environment variable that overrides every seed in the config.
pub const SEED_ENV: &str = "DALIP_SEED";

pub const SECTIONS: [&str; 6] = ["data", "model", "objective", "train", "mixlaw", "output"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticDatasetSpec,
    pub model: TowerConfig,
    pub objective: ObjectiveSection,
    pub train: TrainSection,
    pub mixlaw: MixlawSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Initial temperature.
    pub tau: f64,
    pub normalize_second_order: bool,
    pub reduction: Reduction,
    pub unit_sum: bool,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let d = DalipObjectiveConfig::default();
        Self {
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            tau: DEFAULT_TAU,
            normalize_second_order: d.normalize_second_order,
            reduction: d.reduction,
            unit_sum: d.unit_sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds model initialization and batch shuffling.
    pub seed: u64,
    pub kind: ObjectiveKind,
    pub learn_tau: bool,
    pub min_tau: f64,
    pub matching: Matching,
    pub eval_each_epoch: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            base_lr: t.base_lr,
            min_lr: t.min_lr,
            warmup_steps: t.warmup_steps,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            seed: t.seed,
            kind: t.kind,
            learn_tau: t.learn_tau,
            min_tau: t.min_tau,
            matching: t.matching,
            eval_each_epoch: t.eval_each_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixlawSection {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub grid_points: usize,
    pub gamma_exclude: f64,
    pub tol: f64,
    /// Domain whose law is written in `r`; the other uses `1 - r`. When
    /// unset the lexicographically first domain is primary.
    pub primary: Option<String>,
    /// Weights of the two domain accuracies in the mixing objective.
    pub weights: [f64; 2],
}

impl Default for MixlawSection {
    fn default() -> Self {
        let f = FitOptions::default();
        Self {
            gamma_min: f.gamma_min,
            gamma_max: f.gamma_max,
            grid_points: f.grid_points,
            gamma_exclude: f.gamma_exclude,
            tol: f.tol,
            primary: None,
            weights: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    pub fn objective(&self) -> DalipObjectiveConfig {
        let o = &self.objective;
        DalipObjectiveConfig {
            lambda1: o.lambda1,
            lambda2: o.lambda2,
            log_tau: o.tau.ln(),
            normalize_second_order: o.normalize_second_order,
            reduction: o.reduction,
            unit_sum: o.unit_sum,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            base_lr: t.base_lr,
            min_lr: t.min_lr,
            warmup_steps: t.warmup_steps,
            adam: AdamConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
            },
            seed: t.seed,
            objective: self.objective(),
            kind: t.kind,
            learn_tau: t.learn_tau,
            min_tau: t.min_tau,
            matching: t.matching,
            eval_each_epoch: t.eval_each_epoch,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        let m = &self.mixlaw;
        FitOptions {
            gamma_min: m.gamma_min,
            gamma_max: m.gamma_max,
            grid_points: m.grid_points,
            gamma_exclude: m.gamma_exclude,
            tol: m.tol,
        }
    }

    /// Semantic checks, each error prefixed with its section.
    pub fn validate(&self) -> Result<(), CliError> {
        let in_section = |section: &str, r: dalip_core::Result<()>| {
            r.map_err(|e| match e {
                dalip_core::Error::Config(m) | dalip_core::Error::Param(m) => CliError::Config(format!("{section}: {m}")),
                other => CliError::Config(format!("{section}: {other}")),
            })
        };
        in_section("data", self.data.validate())?;
        in_section("model", self.model.validate())?;
        if !(self.objective.tau > 0.0) || !self.objective.tau.is_finite() {
            return Err(CliError::Config(format!("objective.tau: must be > 0, got {}", self.objective.tau)));
        }
        in_section("objective", self.objective().validate())?;
        in_section("train", self.train().validate())?;
        in_section("mixlaw", self.fit_options().validate())?;
        let [w1, w2] = self.mixlaw.weights;
        if !(w1 >= 0.0 && w2 >= 0.0) || w1 + w2 == 0.0 || !(w1 + w2).is_finite() {
            return Err(CliError::Config(format!("mixlaw.weights: must be >= 0 and not both zero, got [{w1}, {w2}]")));
        }
        if self.model.raw_dim != self.data.raw_dim {
            return Err(CliError::Config(format!(
                "model.raw_dim: {} does not match data.raw_dim {}",
                self.model.raw_dim, self.data.raw_dim
            )));
        }
        Ok(())
    }
}

/// `(section, field, default)` for every leaf of the schema, in order.
pub fn schema_leaves() -> Vec<(String, String, Value)> {
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    for section in SECTIONS {
        let Some(Value::Object(fields)) = defaults.get(section) else {
            continue;
        };
        for (field, value) in fields {
            out.push((section.to_string(), field.clone(), value.clone()));
        }
    }
    out
}

/// Flag spelling of a leaf: `--train-batch-size` for `train.batch_size`.
pub fn flag_name(section: &str, field: &str) -> String {
    format!("{section}-{}", field.replace('_', "-"))
}

/// Parse a flag value as JSON, falling back to a bare string.
pub fn flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub struct Overrides {
    /// `(section, field, value)` from individual flags.
    pub fields: Vec<(String, String, Value)>,
    pub seed_flag: Option<u64>,
    pub seed_env: Option<String>,
}

/// Build the config: file (or defaults), then `DALIP_SEED`, then field
/// flags, then `--seed`. Later steps win.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            if !v.is_object() {
                return Err(CliError::Config(format!("{}: top level must be an object", p.display())));
            }
            v
        }
        None => Value::Object(Map::new()),
    };
    if let Some(raw) = &overrides.seed_env {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}: expected an unsigned integer, got {raw:?}")))?;
        set_leaf(&mut doc, "data", "seed", seed.into());
        set_leaf(&mut doc, "train", "seed", seed.into());
    }
    for (section, field, value) in &overrides.fields {
        set_leaf(&mut doc, section, field, value.clone());
    }
    if let Some(seed) = overrides.seed_flag {
        set_leaf(&mut doc, "data", "seed", seed.into());
        set_leaf(&mut doc, "train", "seed", seed.into());
    }
    let origin = path.map(|p| format!("{}: ", p.display())).unwrap_or_default();
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let at = e.path().to_string();
        CliError::Config(format!("{origin}{at}: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn set_leaf(doc: &mut Value, section: &str, field: &str, value: Value) {
    let root = doc.as_object_mut().expect("object root");
    let entry = root.entry(section.to_string()).or_insert_with(|| Value::Object(Map::new()));
    if !entry.is_object() {
        *entry = Value::Object(Map::new());
    }
    entry.as_object_mut().expect("object section").insert(field.to_string(), value);
}
