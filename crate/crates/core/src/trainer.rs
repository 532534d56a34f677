//! The continual training loop and the baseline strategies.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, StreamPreset, TaskId, TaskSpec, TrainData};
use crate::error::{Error, Result};
use crate::metrics::ScoreMatrix;
use crate::model::{ExpertBank, FitConfig, Gates, ModelConfig, Module, ToyMllm};
use crate::proxy::{self, AllocationPlan, ModulePlan, Sensitivities};
use crate::router::{self, AutoencoderConfig, RoutingDecision, TaskAutoencoder};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Dmole,
    SeqFt,
    DenseMole,
    SparseMole,
    Mola,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Dmole,
        Strategy::SeqFt,
        Strategy::DenseMole,
        Strategy::SparseMole,
        Strategy::Mola,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Dmole => "dmole",
            Strategy::SeqFt => "seq_ft",
            Strategy::DenseMole => "dense_mole",
            Strategy::SparseMole => "sparse_mole",
            Strategy::Mola => "mola",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Whether the strategy trains autoencoder routers and gates by them.
    pub fn routed(self) -> bool {
        matches!(self, Strategy::Dmole | Strategy::SparseMole | Strategy::Mola)
    }
}

impl core::fmt::Display for Strategy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Layer experts per task as a fraction of all layers.
    pub budget_ratio: f64,
    /// Explicit layer budget; overrides `budget_ratio` when set.
    pub b_total: Option<usize>,
    /// Rank of experts placed on every layer (dense/sparse MoLE, seq-FT).
    pub baseline_rank: usize,
    pub top_k: usize,
    pub threshold_scale: f64,
    pub subset_fraction: f64,
    pub subset_min: usize,
    pub fit: FitConfig,
    pub pretrain: FitConfig,
    pub autoencoder: AutoencoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            budget_ratio: 0.5,
            b_total: None,
            baseline_rank: 4,
            top_k: router::DEFAULT_TOP_K,
            threshold_scale: router::DEFAULT_THRESHOLD_SCALE,
            subset_fraction: 0.01,
            subset_min: 64,
            // 3 epochs at 1e-3 barely moves the experts off zero-shot accuracy
            fit: FitConfig {
                epochs: 5,
                learning_rate: 1e-2,
                batch_size: 16,
            },
            pretrain: FitConfig {
                epochs: 5,
                learning_rate: 1e-3,
                batch_size: 16,
            },
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(self.budget_ratio > 0.0 && self.budget_ratio <= 1.0) {
            return bad(format!("budget_ratio must be in (0, 1], got {}", self.budget_ratio));
        }
        if self.baseline_rank == 0 {
            return bad(String::from("baseline_rank must be positive"));
        }
        if self.top_k == 0 {
            return bad(String::from("top_k must be >= 1"));
        }
        if !(self.threshold_scale > 0.0) {
            return bad(format!("threshold_scale must be positive, got {}", self.threshold_scale));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad(format!("subset_fraction must be in (0, 1], got {}", self.subset_fraction));
        }
        for (name, f) in [("fit", self.fit), ("pretrain", self.pretrain)] {
            if f.batch_size == 0 || !(f.learning_rate > 0.0) {
                return bad(format!("{name}: batch_size and learning_rate must be positive"));
            }
        }
        let ae = self.autoencoder;
        if ae.hidden == 0 || ae.batch_size == 0 || !(ae.learning_rate > 0.0) {
            return bad(String::from("autoencoder: hidden, batch_size and learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn b_total(&self, model: &ModelConfig) -> usize {
        self.b_total
            .unwrap_or_else(|| libm::rint(self.budget_ratio * model.total_layers() as f64) as usize)
    }

    /// Checks that depend on the model shape.
    pub fn validate_for(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        let b = self.b_total(model);
        if b == 0 || b > model.total_layers() {
            return Err(Error::InvalidSpec(format!(
                "b_total must be in 1..={}, got {b}",
                model.total_layers()
            )));
        }
        Ok(())
    }
}

/// A task kept for evaluation: its test split and cached router features.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub task_id: TaskId,
    pub name: String,
    pub test: Dataset,
    pub features: Vec<Vec<f64>>,
}

impl EvalTask {
    pub fn new(model: &ToyMllm, spec: &TaskSpec, test: Dataset) -> Result<Self> {
        let features = model.pooled_features(&test.all())?;
        Ok(EvalTask {
            task_id: spec.task_id,
            name: spec.name.clone(),
            test,
            features,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub plan: AllocationPlan,
    pub sensitivities: Sensitivities,
    pub transfer: Option<TaskId>,
    /// Parameters trainable while fitting this task.
    pub trainable_params: usize,
    pub train_loss: Vec<f64>,
    pub threshold: Option<f64>,
    /// Checksum of the backbone and every earlier task's experts, before and
    /// after fitting.
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
    /// `|loss with the new experts gated on - loss gated off|` right after
    /// allocation, on the sensitivity subset.
    pub zero_init_gap: f64,
    pub relative_dynamics: BTreeMap<Module, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: TaskId,
    pub accuracy: f64,
    /// Fraction of samples routed to the backbone alone.
    pub fallback_rate: f64,
    /// Fraction whose top-ranked router is the sample's own task; `None` when
    /// the strategy has no routers yet.
    pub top1_accuracy: Option<f64>,
    /// Per stream task: fraction of samples with that task's experts active,
    /// `None` when the task is not trained yet.
    pub activation: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub threshold_multiplier: f64,
    pub tasks: Vec<TaskEval>,
    pub unseen: Option<TaskEval>,
}

impl Evaluation {
    pub fn accuracies(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.accuracy).collect()
    }
}

/// Everything the stream loop carries from one task to the next. Training
/// data is never stored here; only test splits are kept for evaluation.
#[derive(Clone, Debug)]
pub struct StreamState {
    pub strategy: Strategy,
    pub config: TrainConfig,
    pub seed: u64,
    pub model: ToyMllm,
    pub bank: ExpertBank,
    pub routers: Vec<TaskAutoencoder>,
    pub eval_tasks: Vec<EvalTask>,
    pub unseen: Option<EvalTask>,
    pub trained: Vec<TaskId>,
    pub records: Vec<TaskRecord>,
    /// Index 0 is the zero-shot evaluation, then one per trained task.
    pub evaluations: Vec<Evaluation>,
    pub scores: ScoreMatrix,
}

impl StreamState {
    /// Starts a stream over `eval_tasks` (in training order) and records the
    /// zero-shot row.
    pub fn new(
        model: ToyMllm,
        strategy: Strategy,
        config: TrainConfig,
        seed: u64,
        eval_tasks: Vec<EvalTask>,
        unseen: Option<EvalTask>,
    ) -> Result<Self> {
        config.validate()?;
        if eval_tasks.is_empty() {
            return Err(Error::contract("stream has no tasks"));
        }
        let mut state = StreamState {
            strategy,
            config,
            seed,
            model,
            bank: ExpertBank::new(),
            routers: Vec::new(),
            scores: ScoreMatrix::new(eval_tasks.len()),
            eval_tasks,
            unseen,
            trained: Vec::new(),
            records: Vec::new(),
            evaluations: Vec::new(),
        };
        let zero = state.evaluate(1.0)?;
        state.scores.zero_shot = zero.accuracies();
        state.evaluations.push(zero);
        Ok(state)
    }

    pub fn n_tasks(&self) -> usize {
        self.eval_tasks.len()
    }

    pub fn is_done(&self) -> bool {
        self.trained.len() == self.n_tasks()
    }

    pub fn next_task(&self) -> Option<TaskId> {
        self.eval_tasks.get(self.trained.len()).map(|t| t.task_id)
    }

    /// Identity under which seq-FT keeps its single shared expert set.
    fn shared_task(&self) -> TaskId {
        self.eval_tasks[0].task_id
    }

    fn b_total(&self) -> usize {
        self.config.b_total(&self.model.config)
    }

    fn plan_for(&self, task: TaskId, sens: &Sensitivities) -> Result<(AllocationPlan, bool)> {
        let cfg = &self.model.config;
        let all = |m: Module| (0..cfg.layers(m)).collect::<Vec<_>>();
        let every_layer = || {
            AllocationPlan::from_selection(
                task,
                cfg,
                self.config.baseline_rank,
                &all(Module::Llm),
                &all(Module::Vision),
                Some(sens),
            )
        };
        Ok(match self.strategy {
            Strategy::Dmole => {
                let (split, degenerate) =
                    proxy::split_budget_or_equal(sens.llm.score, sens.vision.score, self.b_total())?;
                let mut plan = proxy::allocate_layers(task, cfg, sens, split, cfg.lora_rank);
                plan.degenerate = degenerate;
                (plan, degenerate)
            }
            Strategy::Mola => (mola_plan(task, cfg, self.b_total(), cfg.lora_rank, sens), false),
            Strategy::DenseMole | Strategy::SparseMole | Strategy::SeqFt => (every_layer(), false),
        })
    }

    /// Runs one task of the stream: subset scoring, allocation, router
    /// training, expert training and evaluation of every task. `train` is only
    /// borrowed for the duration of the call.
    pub fn run_task(&mut self, spec: &TaskSpec, train: &dyn TrainData) -> Result<&TaskRecord> {
        let t = spec.task_id;
        match self.next_task() {
            Some(next) if next == t => {}
            Some(next) => return Err(Error::contract(format!("expected task {next}, got task {t}"))),
            None => return Err(Error::contract("every stream task is already trained")),
        }
        if train.is_empty() {
            return Err(Error::contract(format!("task {t} has no training data")));
        }
        let stage = self.trained.len() as u64;
        let root = self.seed;

        // subset, sensitivity and allocation
        let idx = data::subset(
            train.len(),
            self.config.subset_fraction,
            self.config.subset_min,
            seed::derive(root, "subset", stage),
        )?;
        let sub = train.batch(&idx);
        let sens = proxy::compute_sensitivities(&mut self.model, &sub)?;
        let (plan, _) = self.plan_for(t, &sens)?;

        // router and transfer expert
        let mut transfer = None;
        let mut new_router = None;
        if self.strategy.routed() {
            let feats = self.model.pooled_features(&sub)?;
            if self.strategy == Strategy::Dmole {
                transfer = router::select_transfer_expert(&self.routers, &feats)?;
            }
            let mut rng = seed::derived_rng(root, "router", stage);
            let mut ae = router::train_autoencoder(&feats, t, self.config.autoencoder, &mut rng)?;
            let calib = pooled_features_chunked(&self.model, train)?;
            ae.calibrate_threshold(&calib, self.config.threshold_scale)?;
            new_router = Some(ae);
        }

        // experts
        let owner = if self.strategy == Strategy::SeqFt { self.shared_task() } else { t };
        if !self.bank.has_task(owner) {
            let mut rng = seed::derived_rng(root, "expert-init", stage);
            for m in Module::ALL {
                let p = plan.module(m);
                for l in 0..self.model.config.layers(m) {
                    if p.ranks[l] > 0 {
                        self.bank.allocate(&mut self.model, m, l, owner, p.ranks[l], &mut rng)?;
                    } else {
                        self.bank.mark_unallocated(m, l, owner);
                    }
                }
            }
        }
        let gates = match self.strategy {
            Strategy::SeqFt => Gates::of([owner]),
            Strategy::DenseMole => Gates::of(self.trained.iter().copied().chain([t])),
            _ => Gates::of(transfer.into_iter().chain([t])),
        };

        let zero_init_gap = if self.strategy == Strategy::SeqFt && !self.trained.is_empty() {
            0.0
        } else {
            let on = self.model.batch_loss(&self.bank, &Gates::of([owner]), &sub)?;
            let off = self.model.batch_loss(&self.bank, &Gates::none(), &sub)?;
            libm::fabs(on - off)
        };

        let mut frozen = self.model.backbone_ids();
        if self.strategy != Strategy::SeqFt {
            frozen.extend(self.bank.params_before(t));
        }
        let frozen_checksum_before = self.model.checksum(&frozen);
        let weights_before = self.model.effective_weights(&self.bank, &gates);

        self.model.freeze_for_task(&self.bank, owner);
        let trainable_params = self.model.trainable_count();
        let mut rng = seed::derived_rng(root, "train-order", stage);
        let train_loss = self.model.fit(&self.bank, &gates, train, self.config.fit, &mut rng)?;
        self.model.params.set_requires_grad_all(false);

        let frozen_checksum_after = self.model.checksum(&frozen);
        let weights_after = self.model.effective_weights(&self.bank, &gates);
        let relative_dynamics = proxy::relative_dynamics(&weights_before, &weights_after)?;

        let threshold = new_router.as_ref().and_then(|r| r.threshold());
        if let Some(r) = new_router {
            self.routers.push(r);
        }
        self.trained.push(t);
        self.records.push(TaskRecord {
            task_id: t,
            plan,
            sensitivities: sens,
            transfer,
            trainable_params,
            train_loss,
            threshold,
            frozen_checksum_before,
            frozen_checksum_after,
            zero_init_gap,
            relative_dynamics,
        });
        let eval = self.evaluate(1.0)?;
        self.scores.push_row(eval.accuracies())?;
        self.evaluations.push(eval);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Active expert sets for each feature vector under the current state.
    pub fn gates_for(&self, features: &[Vec<f64>], multiplier: f64) -> Result<Vec<(Gates, Option<RoutingDecision>)>> {
        if self.trained.is_empty() {
            return Ok(vec![(Gates::none(), None); features.len()]);
        }
        match self.strategy {
            Strategy::SeqFt => Ok(vec![(Gates::of([self.shared_task()]), None); features.len()]),
            Strategy::DenseMole => Ok(vec![(Gates::of(self.trained.iter().copied()), None); features.len()]),
            _ => features
                .iter()
                .map(|z| {
                    let d = router::route(&self.routers, z, self.config.top_k, multiplier)?;
                    // an active task brings the transfer expert it was trained with
                    let partners = d
                        .active
                        .iter()
                        .filter_map(|&k| self.records.iter().find(|r| r.task_id == k).and_then(|r| r.transfer));
                    Ok((Gates::of(d.active.iter().copied().chain(partners)), Some(d)))
                })
                .collect(),
        }
    }

    fn evaluate_task(&self, task: &EvalTask, multiplier: f64) -> Result<TaskEval> {
        let n = task.test.len();
        let routed = self.gates_for(&task.features, multiplier)?;
        let mut groups: BTreeMap<&Gates, Vec<usize>> = BTreeMap::new();
        for (i, (g, _)) in routed.iter().enumerate() {
            groups.entry(g).or_default().push(i);
        }
        let mut correct = 0usize;
        for (gates, idx) in groups {
            let batch = task.test.batch(&idx);
            let pred = self.model.predict(&self.bank, gates, &batch)?;
            correct += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        }
        let fallback = routed.iter().filter(|(g, _)| g.is_empty()).count();
        let top1_accuracy = (self.strategy.routed() && !self.routers.is_empty()).then(|| {
            routed
                .iter()
                .filter(|(_, d)| d.as_ref().and_then(RoutingDecision::top1) == Some(task.task_id))
                .count() as f64
                / n as f64
        });
        let activation = self
            .eval_tasks
            .iter()
            .map(|e| {
                let k = if self.strategy == Strategy::SeqFt { self.shared_task() } else { e.task_id };
                self.trained.contains(&e.task_id).then(|| {
                    routed.iter().filter(|(g, _)| g.is_active(k)).count() as f64 / n as f64
                })
            })
            .collect();
        Ok(TaskEval {
            task_id: task.task_id,
            accuracy: correct as f64 / n as f64,
            fallback_rate: fallback as f64 / n as f64,
            top1_accuracy,
            activation,
        })
    }

    /// Scores every stream task (and the unseen task, if any) with thresholds
    /// multiplied by `multiplier`. Does not change the state.
    pub fn evaluate(&self, multiplier: f64) -> Result<Evaluation> {
        Ok(Evaluation {
            threshold_multiplier: multiplier,
            tasks: self
                .eval_tasks
                .iter()
                .map(|e| self.evaluate_task(e, multiplier))
                .collect::<Result<_>>()?,
            unseen: self.unseen.as_ref().map(|u| self.evaluate_task(u, multiplier)).transpose()?,
        })
    }

    /// Sets of frozen parameters checked by the freeze audit are the backbone
    /// plus all experts of earlier tasks; this reports every record whose
    /// checksum moved.
    pub fn freeze_violations(&self) -> Vec<TaskId> {
        self.records
            .iter()
            .filter(|r| r.frozen_checksum_before != r.frozen_checksum_after)
            .map(|r| r.task_id)
            .collect()
    }
}

/// MoLA-style budgets: the module split follows the towers' layer counts, and
/// inside a tower `budget * rank` rank units are spread in proportion to depth
/// (layer `l` weighs `l + 1`), so deeper layers get larger experts while the
/// parameter count matches `budget` experts of `rank`.
pub fn mola_plan(task: TaskId, cfg: &ModelConfig, b_total: usize, rank: usize, sens: &Sensitivities) -> AllocationPlan {
    let (n_llm, n_vis) = (cfg.n_llm_layers, cfg.n_vision_layers);
    let b_total = b_total.min(n_llm + n_vis);
    let mut b_vis = (libm::rint(b_total as f64 * n_vis as f64 / (n_llm + n_vis) as f64) as usize).min(n_vis);
    let mut b_llm = b_total - b_vis;
    if b_llm > n_llm {
        b_vis += b_llm - n_llm;
        b_llm = n_llm;
    }
    let module_plan = |m: Module, budget: usize| {
        let ranks = depth_proportional(budget * rank, cfg.layers(m));
        let indicators: Vec<u8> = ranks.iter().map(|&r| u8::from(r > 0)).collect();
        let mut ranked_layers: Vec<usize> = (0..ranks.len()).rev().collect();
        ranked_layers.retain(|&l| ranks[l] > 0);
        ModulePlan {
            budget,
            ranked_layers,
            indicators,
            ranks,
            grad_norms: sens.norms(m),
        }
    };
    let r_vision = if b_total == 0 { 0.0 } else { b_vis as f64 / b_total as f64 };
    AllocationPlan {
        task_id: task,
        b_total,
        r_llm: 1.0 - r_vision,
        r_vision,
        rank,
        degenerate: false,
        llm: module_plan(Module::Llm, b_llm),
        vision: module_plan(Module::Vision, b_vis),
    }
}

/// Largest-remainder split of `units` over `n` layers with weights `1..=n`;
/// remainder ties go to the deeper layer.
fn depth_proportional(units: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let total = n * (n + 1) / 2;
    let mut out: Vec<usize> = (1..=n).map(|w| units * w / total).collect();
    let mut left = units - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    // remainder of units*w/total, compared exactly as integers
    order.sort_by(|&a, &b| ((units * (b + 1)) % total).cmp(&((units * (a + 1)) % total)).then(b.cmp(&a)));
    for &l in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[l] += 1;
        left -= 1;
    }
    out
}

fn pooled_features_chunked(model: &ToyMllm, data: &dyn TrainData) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(256) {
        out.extend(model.pooled_features(&data.batch(chunk))?);
    }
    Ok(out)
}

/// Builds and pretrains the backbone on the preset's generic task.
pub fn pretrained_backbone(config: ModelConfig, generic: &TaskSpec, fit: FitConfig, root: u64) -> Result<ToyMllm> {
    let mut model = ToyMllm::new(config, &mut seed::derived_rng(root, "init", 0))?;
    let ds = data::generate(generic)?;
    model.pretrain(&ds.train, fit, &mut seed::derived_rng(root, "pretrain", 0))?;
    Ok(model)
}

/// Pretrains the backbone, generates every task and evaluates the zero-shot
/// row. Returns the state together with the training splits in stream order;
/// the caller hands each split to [`StreamState::run_task`] and drops it.
pub fn prepare_stream(
    preset: &StreamPreset,
    model_config: ModelConfig,
    strategy: Strategy,
    config: TrainConfig,
    root: u64,
) -> Result<(StreamState, Vec<Dataset>)> {
    model_config.validate()?;
    config.validate_for(&model_config)?;
    let model = pretrained_backbone(model_config, &preset.generic, config.pretrain, root)?;
    let mut trains = Vec::with_capacity(preset.tasks.len());
    let mut evals = Vec::with_capacity(preset.tasks.len());
    for spec in &preset.tasks {
        let ds = data::generate(spec)?;
        evals.push(EvalTask::new(&model, spec, ds.test)?);
        trains.push(ds.train);
    }
    let unseen = data::generate(&preset.unseen)?;
    let unseen = EvalTask::new(&model, &preset.unseen, unseen.test)?;
    let state = StreamState::new(model, strategy, config, root, evals, Some(unseen))?;
    Ok((state, trains))
}

/// Runs a whole preset with one strategy. Each task's training split is
/// handed to [`StreamState::run_task`] once and dropped afterwards.
pub fn run_stream(
    preset: &StreamPreset,
    model_config: ModelConfig,
    strategy: Strategy,
    config: TrainConfig,
    root: u64,
) -> Result<StreamState> {
    let (mut state, trains) = prepare_stream(preset, model_config, strategy, config, root)?;
    for (spec, train) in preset.tasks.iter().zip(trains) {
        state.run_task(spec, &train)?;
    }
    Ok(state)
}
