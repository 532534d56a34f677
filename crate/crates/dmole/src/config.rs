//! Run configuration: a TOML file with one table per concern.
//!
//! Every field has a default, so an empty file is a valid configuration of
//! the default "heterogeneous-5" D-MoLE run. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use dmole_core::data::{GeneratorConfig, StreamPreset};
use dmole_core::model::{FitConfig, ModelConfig};
use dmole_core::router::AutoencoderConfig;
use dmole_core::trainer::{Strategy, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const PRESETS: [&str; 2] = ["heterogeneous-5", "twin-pair"];

/// Task ids run from 1; id 99 belongs to the unseen holdout task.
pub const MAX_CUSTOM_TASKS: usize = 98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Ignored when `tasks` is non-empty.
    pub preset: String,
    pub strategy: Strategy,
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Parent directory of run directories; `DMOLE_OUTPUT_ROOT` and `--out`
    /// take precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub budget: BudgetConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub pretrain: PretrainConfig,
    pub routing: RoutingConfig,
    pub data: GeneratorConfig,
    /// Explicit task stream replacing the preset.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// Layer experts per task as a fraction of all layers.
    pub ratio: f64,
    /// Explicit layer count; overrides `ratio`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_total: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Rank of the every-layer experts of seq_ft, dense_mole and sparse_mole.
    pub baseline_rank: usize,
    pub subset_fraction: f64,
    pub subset_min: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub top_k: usize,
    /// Multiplier on the largest training reconstruction loss.
    pub threshold_scale: f64,
    pub autoencoder: AutoencoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub modality_mix: f64,
    /// Tasks with the same key share class geometry; defaults to the
    /// task's position (1-based).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            preset: String::from("heterogeneous-5"),
            strategy: Strategy::Dmole,
            seed: 0,
            output_dir: None,
            budget: BudgetConfig {
                ratio: t.budget_ratio,
                b_total: t.b_total,
            },
            model: ModelConfig::default(),
            training: TrainingConfig {
                epochs: t.fit.epochs,
                learning_rate: t.fit.learning_rate,
                batch_size: t.fit.batch_size,
                baseline_rank: t.baseline_rank,
                subset_fraction: t.subset_fraction,
                subset_min: t.subset_min,
            },
            pretrain: PretrainConfig {
                epochs: t.pretrain.epochs,
                learning_rate: t.pretrain.learning_rate,
                batch_size: t.pretrain.batch_size,
            },
            routing: RoutingConfig {
                top_k: t.top_k,
                threshold_scale: t.threshold_scale,
                autoencoder: t.autoencoder,
            },
            data: GeneratorConfig::default(),
            tasks: Vec::new(),
        }
    }
}

impl Default for BudgetConfig {
    fn default() -> Self {
        RunConfig::default().budget
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        RunConfig::default().training
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        RunConfig::default().pretrain
    }
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RunConfig::default().routing
    }
}

/// One offending field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Command-line values that replace config fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<String>,
    pub strategy: Option<Strategy>,
    pub seed: Option<u64>,
    pub b_total: Option<usize>,
    pub budget_ratio: Option<f64>,
    pub top_k: Option<usize>,
    pub threshold_scale: Option<f64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().trim().to_string() + &span_hint(text, e.span())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::ConfigNotFound(path.to_path_buf()))
            }
            Err(e) => return Err(CliError::io(path, e)),
        };
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// sha256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.preset {
            self.preset.clone_from(p);
        }
        if let Some(s) = o.strategy {
            self.strategy = s;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(b) = o.b_total {
            self.budget.b_total = Some(b);
        }
        if let Some(r) = o.budget_ratio {
            self.budget.ratio = r;
        }
        if let Some(k) = o.top_k {
            self.routing.top_k = k;
        }
        if let Some(s) = o.threshold_scale {
            self.routing.threshold_scale = s;
        }
        if let Some(e) = o.epochs {
            self.training.epochs = e;
        }
        if let Some(lr) = o.learning_rate {
            self.training.learning_rate = lr;
        }
        if let Some(n) = o.n_train {
            self.data.n_train = n;
        }
        if let Some(n) = o.n_test {
            self.data.n_test = n;
        }
    }

    /// Every problem at once, each named by its dotted field path.
    pub fn check(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.to_string(),
                message,
            })
        };
        let positive = |v: f64| v.is_finite() && v > 0.0;

        if self.tasks.is_empty() && !PRESETS.contains(&self.preset.as_str()) {
            err("preset", format!("unknown preset '{}', expected one of {}", self.preset, PRESETS.join(", ")));
        }
        // toml integers are signed
        if self.seed > i64::MAX as u64 {
            err("seed", format!("must be at most {}", i64::MAX));
        }

        let m = &self.model;
        for (name, v) in [
            ("d_v", m.d_v),
            ("d_t", m.d_t),
            ("n_vision_layers", m.n_vision_layers),
            ("n_llm_layers", m.n_llm_layers),
            ("n_vision_tokens", m.n_vision_tokens),
            ("n_text_tokens", m.n_text_tokens),
            ("lora_rank", m.lora_rank),
        ] {
            if v == 0 {
                err(&format!("model.{name}"), String::from("must be positive"));
            }
        }
        if m.n_classes < 2 {
            err("model.n_classes", format!("must be at least 2, got {}", m.n_classes));
        }
        if m.n_classes != self.data.n_classes {
            err(
                "data.n_classes",
                format!("must equal model.n_classes ({}), got {}", m.n_classes, self.data.n_classes),
            );
        }

        if !(self.budget.ratio > 0.0 && self.budget.ratio <= 1.0) {
            err("budget.ratio", format!("must be in (0, 1], got {}", self.budget.ratio));
        }
        let layers = m.n_vision_layers + m.n_llm_layers;
        if let Some(b) = self.budget.b_total {
            if b == 0 || b > layers {
                err("budget.b_total", format!("must be in 1..={layers}, got {b}"));
            }
        } else if self.budget.ratio > 0.0 && (self.budget.ratio * layers as f64).round() < 1.0 {
            err("budget.ratio", format!("gives no layers out of {layers}"));
        }

        let t = &self.training;
        if t.epochs == 0 {
            err("training.epochs", String::from("must be positive"));
        }
        if !positive(t.learning_rate) {
            err("training.learning_rate", format!("must be positive, got {}", t.learning_rate));
        }
        if t.batch_size == 0 {
            err("training.batch_size", String::from("must be positive"));
        }
        if t.baseline_rank == 0 {
            err("training.baseline_rank", String::from("must be positive"));
        }
        if !(t.subset_fraction > 0.0 && t.subset_fraction <= 1.0) {
            err("training.subset_fraction", format!("must be in (0, 1], got {}", t.subset_fraction));
        }
        if t.subset_min == 0 {
            err("training.subset_min", String::from("must be positive"));
        }

        let p = &self.pretrain;
        if !positive(p.learning_rate) {
            err("pretrain.learning_rate", format!("must be positive, got {}", p.learning_rate));
        }
        if p.batch_size == 0 {
            err("pretrain.batch_size", String::from("must be positive"));
        }

        let r = &self.routing;
        if r.top_k == 0 {
            err("routing.top_k", String::from("must be at least 1"));
        }
        if !positive(r.threshold_scale) {
            err("routing.threshold_scale", format!("must be positive, got {}", r.threshold_scale));
        }
        let ae = &r.autoencoder;
        if ae.hidden == 0 {
            err("routing.autoencoder.hidden", String::from("must be positive"));
        }
        if ae.epochs == 0 {
            err("routing.autoencoder.epochs", String::from("must be positive"));
        }
        if !positive(ae.learning_rate) {
            err("routing.autoencoder.learning_rate", format!("must be positive, got {}", ae.learning_rate));
        }
        if ae.batch_size == 0 {
            err("routing.autoencoder.batch_size", String::from("must be positive"));
        }

        let d = &self.data;
        if d.n_train < d.n_classes {
            err("data.n_train", format!("must hold one sample per class ({})", d.n_classes));
        }
        if d.n_test < d.n_classes {
            err("data.n_test", format!("must hold one sample per class ({})", d.n_classes));
        }
        if !positive(d.separation) {
            err("data.separation", format!("must be positive, got {}", d.separation));
        }
        if !positive(d.noise) {
            err("data.noise", format!("must be positive, got {}", d.noise));
        }
        if !(d.shift.is_finite() && d.shift >= 0.0) {
            err("data.shift", format!("must be non-negative, got {}", d.shift));
        }

        if self.tasks.len() > MAX_CUSTOM_TASKS {
            err("tasks", format!("at most {MAX_CUSTOM_TASKS} tasks, got {}", self.tasks.len()));
        }
        let mut names = BTreeSet::new();
        for (i, task) in self.tasks.iter().enumerate() {
            if task.name.trim().is_empty() {
                err(&format!("tasks[{i}].name"), String::from("must not be empty"));
            } else if !names.insert(task.name.as_str()) {
                err(&format!("tasks[{i}].name"), format!("duplicate task name '{}'", task.name));
            }
            if !(0.0..=1.0).contains(&task.modality_mix) {
                err(&format!("tasks[{i}].modality_mix"), format!("must be in [0, 1], got {}", task.modality_mix));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let errs = self.check();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Invalid(errs))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            budget_ratio: self.budget.ratio,
            b_total: self.budget.b_total,
            baseline_rank: self.training.baseline_rank,
            top_k: self.routing.top_k,
            threshold_scale: self.routing.threshold_scale,
            subset_fraction: self.training.subset_fraction,
            subset_min: self.training.subset_min,
            fit: FitConfig {
                epochs: self.training.epochs,
                learning_rate: self.training.learning_rate,
                batch_size: self.training.batch_size,
            },
            pretrain: FitConfig {
                epochs: self.pretrain.epochs,
                learning_rate: self.pretrain.learning_rate,
                batch_size: self.pretrain.batch_size,
            },
            autoencoder: self.routing.autoencoder,
        }
    }

    pub fn stream(&self) -> Result<StreamPreset, CliError> {
        let dims = self.model.token_dims();
        let preset = if self.tasks.is_empty() {
            StreamPreset::by_name(&self.preset, self.seed, dims, self.data)?
        } else {
            let entries: Vec<(String, f64, u64)> = self
                .tasks
                .iter()
                .enumerate()
                .map(|(i, t)| (t.name.clone(), t.modality_mix, t.geometry.unwrap_or(i as u64 + 1)))
                .collect();
            StreamPreset::custom(self.seed, dims, self.data, &entries)?
        };
        Ok(preset)
    }

    /// Directory name used when no explicit output path is given.
    pub fn run_name(&self) -> String {
        let stream = if self.tasks.is_empty() { self.preset.as_str() } else { "custom" };
        format!("{stream}-{}-s{}", self.strategy, self.seed)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
