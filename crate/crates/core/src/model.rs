//! Two-tower toy multimodal model with per-task LoRA attachment points.
//!
//! Vision tokens pass through a stack of residual per-token MLP blocks
//! (`x <- x + relu(x W1 + b1) W2 + b2`), are max-pooled, and projected into a
//! single prefix token that is prepended to the text tokens. The text tower
//! runs the same block type; its outputs are mean-pooled into a linear
//! classification head. Every block weight `W` may carry LoRA experts
//! `dW = B A` (`B: d x r`, `A: r x d`), mixed per layer as
//! `x W + sum_k gate_k * x B_k A_k`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, TaskId, TokenDims, TrainData};
use crate::error::{Error, Result};
use crate::nn::{Optimizer, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seed::{self, Rng};

pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub n_vision_layers: usize,
    pub n_llm_layers: usize,
    pub n_vision_tokens: usize,
    pub n_text_tokens: usize,
    pub n_classes: usize,
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_v: 16,
            d_t: 32,
            n_vision_layers: 4,
            n_llm_layers: 6,
            n_vision_tokens: 4,
            n_text_tokens: 4,
            n_classes: 4,
            lora_rank: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_v,
            self.d_t,
            self.n_vision_layers,
            self.n_llm_layers,
            self.n_vision_tokens,
            self.n_text_tokens,
            self.n_classes,
            self.lora_rank,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(String::from("model dimensions must be positive")));
        }
        if self.lora_rank >= self.d_v.min(self.d_t) {
            return Err(Error::InvalidSpec(format!(
                "lora_rank {} must be below min(d_v, d_t) = {}",
                self.lora_rank,
                self.d_v.min(self.d_t)
            )));
        }
        Ok(())
    }

    pub fn token_dims(&self) -> TokenDims {
        TokenDims {
            n_vision_tokens: self.n_vision_tokens,
            d_v: self.d_v,
            n_text_tokens: self.n_text_tokens,
            d_t: self.d_t,
        }
    }

    pub fn layers(&self, module: Module) -> usize {
        match module {
            Module::Vision => self.n_vision_layers,
            Module::Llm => self.n_llm_layers,
        }
    }

    pub fn width(&self, module: Module) -> usize {
        match module {
            Module::Vision => self.d_v,
            Module::Llm => self.d_t,
        }
    }

    pub fn total_layers(&self) -> usize {
        self.n_vision_layers + self.n_llm_layers
    }

    pub fn feature_dim(&self) -> usize {
        self.d_v + self.d_t
    }

    /// Parameters of one layer-level expert (both slots) at `rank`.
    pub fn expert_params(&self, module: Module, rank: usize) -> usize {
        2 * (2 * rank * self.width(module))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Llm,
    Vision,
}

impl Module {
    pub const ALL: [Module; 2] = [Module::Llm, Module::Vision];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::Llm => "llm",
            Module::Vision => "vision",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "llm" => Some(Module::Llm),
            "vision" => Some(Module::Vision),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    W1,
    W2,
}

impl Slot {
    pub const ALL: [Slot; 2] = [Slot::W1, Slot::W2];

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::W1 => "w1",
            Slot::W2 => "w2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Block {
    pub fn weight(&self, slot: Slot) -> ParamId {
        match slot {
            Slot::W1 => self.w1,
            Slot::W2 => self.w2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraExpert {
    pub task_id: TaskId,
    pub module: Module,
    pub layer: usize,
    pub slot: Slot,
    pub rank: usize,
    #[serde(skip, default = "dangling")]
    pub a: ParamId,
    #[serde(skip, default = "dangling")]
    pub b: ParamId,
}

fn dangling() -> ParamId {
    ParamId(usize::MAX)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExpertKey {
    pub module: Module,
    pub layer: usize,
    pub slot: Slot,
    pub task_id: TaskId,
}

/// Task-indexed LoRA experts and layer allocation indicators. Expert
/// parameters live in the owning model's [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpertBank {
    experts: BTreeMap<ExpertKey, LoraExpert>,
    indicators: BTreeMap<(Module, usize, TaskId), bool>,
}

/// Binary expert gates: the set of tasks whose experts participate.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Gates(BTreeSet<TaskId>);

impl Gates {
    pub fn none() -> Self {
        Gates(BTreeSet::new())
    }

    pub fn of(tasks: impl IntoIterator<Item = TaskId>) -> Self {
        Gates(tasks.into_iter().collect())
    }

    pub fn is_active(&self, task: TaskId) -> bool {
        self.0.contains(&task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.0.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn expert_param_name(module: Module, layer: usize, slot: Slot, task: TaskId, factor: &str) -> String {
    format!("expert.{}.{layer}.{}.t{task}.{factor}", module.as_str(), slot.as_str())
}

impl ExpertBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates zero-initialized experts on both slots of (`module`, `layer`) for `task`.
    pub fn allocate(
        &mut self,
        model: &mut ToyMllm,
        module: Module,
        layer: usize,
        task: TaskId,
        rank: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        if layer >= model.config.layers(module) {
            return Err(Error::contract(format!("{} layer {layer} does not exist", module.as_str())));
        }
        if self.has_layer(module, layer, task) {
            return Err(Error::contract(format!(
                "task {task} already has an expert on {} layer {layer}",
                module.as_str()
            )));
        }
        let d = model.config.width(module);
        for slot in Slot::ALL {
            let a = Tensor::matrix(rank, d, seed::normal_vec(rng, rank * d, LORA_INIT_STD))?;
            let b = Tensor::zeros(d, rank);
            let a = model.params.insert(expert_param_name(module, layer, slot, task, "a"), a);
            let b = model.params.insert(expert_param_name(module, layer, slot, task, "b"), b);
            let key = ExpertKey {
                module,
                layer,
                slot,
                task_id: task,
            };
            self.experts.insert(
                key,
                LoraExpert {
                    task_id: task,
                    module,
                    layer,
                    slot,
                    rank,
                    a,
                    b,
                },
            );
        }
        self.indicators.insert((module, layer, task), true);
        Ok(())
    }

    /// Records a zero indicator (no expert) for bookkeeping.
    pub fn mark_unallocated(&mut self, module: Module, layer: usize, task: TaskId) {
        self.indicators.entry((module, layer, task)).or_insert(false);
    }

    /// Re-attaches an expert whose parameters already exist in the store.
    pub fn insert_expert(&mut self, expert: LoraExpert) {
        let key = ExpertKey {
            module: expert.module,
            layer: expert.layer,
            slot: expert.slot,
            task_id: expert.task_id,
        };
        self.experts.insert(key, expert);
        self.indicators.insert((expert.module, expert.layer, expert.task_id), true);
    }

    pub fn get(&self, module: Module, layer: usize, slot: Slot, task: TaskId) -> Option<&LoraExpert> {
        self.experts.get(&ExpertKey {
            module,
            layer,
            slot,
            task_id: task,
        })
    }

    pub fn has_layer(&self, module: Module, layer: usize, task: TaskId) -> bool {
        self.indicators.get(&(module, layer, task)).copied().unwrap_or(false)
    }

    pub fn indicator(&self, module: Module, layer: usize, task: TaskId) -> u8 {
        u8::from(self.has_layer(module, layer, task))
    }

    pub fn indicators(&self) -> impl Iterator<Item = ((Module, usize, TaskId), bool)> + '_ {
        self.indicators.iter().map(|(k, v)| (*k, *v))
    }

    pub fn experts(&self) -> impl Iterator<Item = &LoraExpert> {
        self.experts.values()
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.experts.keys().map(|k| k.task_id).collect()
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        self.experts.keys().any(|k| k.task_id == task)
    }

    /// Number of layers of `module` carrying an expert for `task`.
    pub fn allocated_layers(&self, module: Module, task: TaskId) -> usize {
        self.indicators
            .iter()
            .filter(|((m, _, t), on)| *m == module && *t == task && **on)
            .count()
    }

    pub fn params_of_task(&self, task: TaskId) -> Vec<ParamId> {
        self.experts
            .values()
            .filter(|e| e.task_id == task)
            .flat_map(|e| [e.a, e.b])
            .collect()
    }

    pub fn params_before(&self, task: TaskId) -> Vec<ParamId> {
        self.experts
            .values()
            .filter(|e| e.task_id < task)
            .flat_map(|e| [e.a, e.b])
            .collect()
    }

    pub fn check_gates(&self, gates: &Gates) -> Result<()> {
        for t in gates.tasks() {
            if !self.has_task(t) {
                return Err(Error::contract(format!("gate set for task {t}, which has no experts")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyMllm {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vision: Vec<Block>,
    pub llm: Vec<Block>,
    pub projector_w: ParamId,
    pub projector_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Final vision-tower token states, `(B * n_vision_tokens) x d_v`.
    pub vision_out: Var,
    /// Final text-tower states including the prefix row, `(B * (n_text_tokens + 1)) x d_t`.
    pub llm_out: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl ToyMllm {
    /// Randomly initialized backbone (all parameters trainable).
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let vision = init_tower(&mut params, &config, Module::Vision, rng)?;
        let llm = init_tower(&mut params, &config, Module::Llm, rng)?;
        let (d_v, d_t, c) = (config.d_v, config.d_t, config.n_classes);
        let projector_w = init_gaussian(&mut params, "projector.w", d_v, d_t, libm::sqrt(1.0 / d_v as f64), rng)?;
        let projector_b = params.insert("projector.b", Tensor::zeros(1, d_t).with_requires_grad(true));
        let head_w = init_gaussian(&mut params, "head.w", d_t, c, libm::sqrt(1.0 / d_t as f64), rng)?;
        let head_b = params.insert("head.b", Tensor::zeros(1, c).with_requires_grad(true));
        Ok(ToyMllm {
            config,
            params,
            vision,
            llm,
            projector_w,
            projector_b,
            head_w,
            head_b,
        })
    }

    /// Rebuilds the model structure over an existing parameter store by name.
    pub fn from_store(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let find = |name: String| {
            params
                .find(&name)
                .ok_or_else(|| Error::contract(format!("parameter '{name}' missing from store")))
        };
        let tower = |module: Module| -> Result<Vec<Block>> {
            let p = module.as_str();
            (0..config.layers(module))
                .map(|l| {
                    Ok(Block {
                        w1: find(format!("{p}.{l}.w1"))?,
                        b1: find(format!("{p}.{l}.b1"))?,
                        w2: find(format!("{p}.{l}.w2"))?,
                        b2: find(format!("{p}.{l}.b2"))?,
                    })
                })
                .collect()
        };
        let vision = tower(Module::Vision)?;
        let llm = tower(Module::Llm)?;
        Ok(ToyMllm {
            projector_w: find(String::from("projector.w"))?,
            projector_b: find(String::from("projector.b"))?,
            head_w: find(String::from("head.w"))?,
            head_b: find(String::from("head.b"))?,
            config,
            params,
            vision,
            llm,
        })
    }

    pub fn blocks(&self, module: Module) -> &[Block] {
        match module {
            Module::Vision => &self.vision,
            Module::Llm => &self.llm,
        }
    }

    /// Every non-expert parameter.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .vision
            .iter()
            .chain(&self.llm)
            .flat_map(|b| [b.w1, b.b1, b.w2, b.b2])
            .collect();
        ids.extend([self.projector_w, self.projector_b, self.head_w, self.head_b]);
        ids
    }

    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for &id in ids {
            for v in self.params.get(id).data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        h
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        bank: &ExpertBank,
        gates: &Gates,
        module: Module,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let block = self.blocks(module)[layer];
        let h = self.mixed_linear(tape, bank, gates, module, layer, Slot::W1, block.w1, x)?;
        let b1 = tape.param(&self.params, block.b1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h)?;
        let o = self.mixed_linear(tape, bank, gates, module, layer, Slot::W2, block.w2, h)?;
        let b2 = tape.param(&self.params, block.b2)?;
        let o = tape.add_bias(o, b2)?;
        tape.add(x, o)
    }

    #[allow(clippy::too_many_arguments)]
    fn mixed_linear(
        &self,
        tape: &mut Tape,
        bank: &ExpertBank,
        gates: &Gates,
        module: Module,
        layer: usize,
        slot: Slot,
        weight: ParamId,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(&self.params, weight)?;
        let mut out = tape.matmul(x, w)?;
        for task in gates.tasks() {
            if let Some(e) = bank.get(module, layer, slot, task) {
                let b = tape.param(&self.params, e.b)?;
                let a = tape.param(&self.params, e.a)?;
                let down = tape.matmul(x, b)?;
                let up = tape.matmul(down, a)?;
                out = tape.add(out, up)?;
            }
        }
        Ok(out)
    }

    /// Records the mixture forward pass: every layer computes
    /// `x W + sum over gated tasks k with an expert here of x B_k A_k`.
    pub fn forward(&self, tape: &mut Tape, bank: &ExpertBank, gates: &Gates, batch: &Batch) -> Result<ForwardVars> {
        bank.check_gates(gates)?;
        let c = &self.config;
        if batch.dims != c.token_dims() {
            return Err(Error::contract("batch token dims do not match the model"));
        }
        let n = batch.len();
        if n == 0 {
            return Err(Error::contract("empty batch"));
        }
        let mut v = tape.input_matrix(n * c.n_vision_tokens, c.d_v, batch.vision.clone())?;
        for l in 0..c.n_vision_layers {
            v = self.block_forward(tape, bank, gates, Module::Vision, l, v)?;
        }
        let vision_out = v;
        let pooled = tape.max_pool(v, c.n_vision_tokens)?;
        let pw = tape.param(&self.params, self.projector_w)?;
        let pb = tape.param(&self.params, self.projector_b)?;
        let prefix = tape.matmul(pooled, pw)?;
        let prefix = tape.add_bias(prefix, pb)?;
        let text = tape.input_matrix(n * c.n_text_tokens, c.d_t, batch.text.clone())?;
        let mut t = tape.prepend_rows(prefix, text, c.n_text_tokens)?;
        for l in 0..c.n_llm_layers {
            t = self.block_forward(tape, bank, gates, Module::Llm, l, t)?;
        }
        let llm_out = t;
        let summary = tape.mean_pool(t, c.n_text_tokens + 1)?;
        let hw = tape.param(&self.params, self.head_w)?;
        let hb = tape.param(&self.params, self.head_b)?;
        let logits = tape.matmul(summary, hw)?;
        let logits = tape.add_bias(logits, hb)?;
        Ok(ForwardVars {
            vision_out,
            llm_out,
            logits,
        })
    }

    pub fn loss(&self, tape: &mut Tape, bank: &ExpertBank, gates: &Gates, batch: &Batch) -> Result<Var> {
        let f = self.forward(tape, bank, gates, batch)?;
        tape.softmax_cross_entropy(f.logits, &batch.labels)
    }

    pub fn logits(&self, bank: &ExpertBank, gates: &Gates, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let f = self.forward(&mut tape, bank, gates, batch)?;
        Ok(tape.to_tensor(f.logits))
    }

    pub fn predict(&self, bank: &ExpertBank, gates: &Gates, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.logits(bank, gates, batch)?;
        let c = self.config.n_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn batch_loss(&self, bank: &ExpertBank, gates: &Gates, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let l = self.loss(&mut tape, bank, gates, batch)?;
        Ok(tape.scalar(l))
    }

    /// Router features per sample: `concat(max over vision tokens of the final
    /// vision states, max over text tokens of the final text-tower states)`,
    /// computed with every expert gated off. The prefix row is excluded.
    pub fn pooled_features(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let c = &self.config;
        let mut tape = Tape::no_grad();
        let f = self.forward(&mut tape, &ExpertBank::new(), &Gates::none(), batch)?;
        let vis = tape.value(f.vision_out);
        let txt = tape.value(f.llm_out);
        let (nv, nt) = (c.n_vision_tokens, c.n_text_tokens);
        Ok((0..batch.len())
            .map(|s| {
                let mut z = vec![f64::NEG_INFINITY; c.d_v + c.d_t];
                for r in 0..nv {
                    let row = &vis[(s * nv + r) * c.d_v..(s * nv + r + 1) * c.d_v];
                    for (zi, v) in z[..c.d_v].iter_mut().zip(row) {
                        *zi = zi.max(*v);
                    }
                }
                for r in 1..=nt {
                    let base = (s * (nt + 1) + r) * c.d_t;
                    for (zi, v) in z[c.d_v..].iter_mut().zip(&txt[base..base + c.d_t]) {
                        *zi = zi.max(*v);
                    }
                }
                z
            })
            .collect())
    }

    /// Makes exactly the experts of `task` trainable; backbone and every other
    /// expert are frozen.
    pub fn freeze_for_task(&mut self, bank: &ExpertBank, task: TaskId) {
        self.params.set_requires_grad_all(false);
        for id in bank.params_of_task(task) {
            self.params.get_mut(id).set_requires_grad(true);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.get(id).requires_grad()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Minibatch training of the currently trainable parameters. Returns the
    /// mean loss of each epoch.
    pub fn fit(
        &mut self,
        bank: &ExpertBank,
        gates: &Gates,
        data: &dyn TrainData,
        cfg: FitConfig,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::contract("training data is empty"));
        }
        let trainable = self.trainable_ids();
        let mut opt = Optimizer::adam(cfg.learning_rate);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch = data.batch(chunk);
                let mut tape = Tape::new();
                let loss = self.loss(&mut tape, bank, gates, &batch)?;
                total += tape.scalar(loss) * chunk.len() as f64;
                Optimizer::zero_grad(&mut self.params, &trainable);
                tape.backward(loss, &mut self.params)?;
                opt.step(&mut self.params, &trainable)?;
            }
            Optimizer::zero_grad(&mut self.params, &trainable);
            history.push(total / data.len() as f64);
        }
        Ok(history)
    }

    /// Supervised training of the whole backbone on a generic task, after which
    /// every parameter is frozen.
    pub fn pretrain(&mut self, data: &dyn TrainData, cfg: FitConfig, rng: &mut Rng) -> Result<Vec<f64>> {
        self.params.set_requires_grad_all(false);
        for id in self.backbone_ids() {
            self.params.get_mut(id).set_requires_grad(true);
        }
        let history = self.fit(&ExpertBank::new(), &Gates::none(), data, cfg, rng)?;
        self.params.set_requires_grad_all(false);
        Ok(history)
    }

    /// Dense block weights with the gated experts folded in: `W + sum_k B_k A_k`.
    pub fn effective_weights(&self, bank: &ExpertBank, gates: &Gates) -> BTreeMap<(Module, usize, Slot), Vec<f64>> {
        let mut out = BTreeMap::new();
        for module in Module::ALL {
            let d = self.config.width(module);
            for (l, block) in self.blocks(module).iter().enumerate() {
                for slot in Slot::ALL {
                    let mut w = self.params.get(block.weight(slot)).data().to_vec();
                    for task in gates.tasks() {
                        if let Some(e) = bank.get(module, l, slot, task) {
                            let b = self.params.get(e.b).data();
                            let a = self.params.get(e.a).data();
                            for i in 0..d {
                                for r in 0..e.rank {
                                    let bir = b[i * e.rank + r];
                                    if bir == 0.0 {
                                        continue;
                                    }
                                    for j in 0..d {
                                        w[i * d + j] += bir * a[r * d + j];
                                    }
                                }
                            }
                        }
                    }
                    out.insert((module, l, slot), w);
                }
            }
        }
        out
    }
}

fn init_gaussian(params: &mut ParamStore, name: &str, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Result<ParamId> {
    let t = Tensor::matrix(rows, cols, seed::normal_vec(rng, rows * cols, std))?.with_requires_grad(true);
    Ok(params.insert(name, t))
}

fn init_tower(params: &mut ParamStore, config: &ModelConfig, module: Module, rng: &mut Rng) -> Result<Vec<Block>> {
    let d = config.width(module);
    let std1 = libm::sqrt(2.0 / d as f64);
    let std2 = libm::sqrt(0.5 / d as f64);
    let p = module.as_str();
    (0..config.layers(module))
        .map(|l| {
            let w1 = init_gaussian(params, &format!("{p}.{l}.w1"), d, d, std1, rng)?;
            let b1 = params.insert(format!("{p}.{l}.b1"), Tensor::zeros(1, d).with_requires_grad(true));
            let w2 = init_gaussian(params, &format!("{p}.{l}.w2"), d, d, std2, rng)?;
            let b2 = params.insert(format!("{p}.{l}.b2"), Tensor::zeros(1, d).with_requires_grad(true));
            Ok(Block { w1, b1, w2, b2 })
        })
        .collect()
}
