//! Gradient-norm layer sensitivity, inter-modal budget split and layer-wise
//! expert allocation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, TaskId};
use crate::error::{Error, Result};
use crate::model::{ExpertBank, Gates, ModelConfig, Module, Slot, ToyMllm};
use crate::nn::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub module: Module,
    pub layer: usize,
    /// L2 norm of the joint gradient of the block's W1 and W2.
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleScore {
    pub module: Module,
    /// `sqrt(sum of squared layer norms)` over the module's blocks.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivities {
    pub layers: Vec<LayerSensitivity>,
    pub llm: ModuleScore,
    pub vision: ModuleScore,
}

impl Sensitivities {
    pub fn from_layers(layers: Vec<LayerSensitivity>) -> Self {
        let score = |m: Module| ModuleScore {
            module: m,
            score: libm::sqrt(
                layers
                    .iter()
                    .filter(|s| s.module == m)
                    .map(|s| s.grad_norm * s.grad_norm)
                    .sum(),
            ),
        };
        Sensitivities {
            llm: score(Module::Llm),
            vision: score(Module::Vision),
            layers,
        }
    }

    pub fn norms(&self, module: Module) -> Vec<f64> {
        let mut v: Vec<(usize, f64)> = self
            .layers
            .iter()
            .filter(|s| s.module == module)
            .map(|s| (s.layer, s.grad_norm))
            .collect();
        v.sort_by_key(|(l, _)| *l);
        v.into_iter().map(|(_, n)| n).collect()
    }

    pub fn score(&self, module: Module) -> f64 {
        match module {
            Module::Llm => self.llm.score,
            Module::Vision => self.vision.score,
        }
    }
}

/// One forward and one backward pass of the mean loss over `subset` through
/// the bare backbone. Only block weights are made differentiable; their
/// `requires_grad` flags and gradient buffers are restored before returning
/// and no parameter is updated.
pub fn compute_sensitivities(model: &mut ToyMllm, subset: &Batch) -> Result<Sensitivities> {
    if subset.is_empty() {
        return Err(Error::contract("sensitivity subset is empty"));
    }
    let weights: Vec<(Module, usize, crate::nn::ParamId)> = Module::ALL
        .iter()
        .flat_map(|&m| {
            model
                .blocks(m)
                .iter()
                .enumerate()
                .flat_map(move |(l, b)| Slot::ALL.map(|s| (m, l, b.weight(s))))
        })
        .collect();
    let saved: Vec<_> = weights
        .iter()
        .map(|&(_, _, id)| {
            let t = model.params.get(id);
            (t.requires_grad(), t.grad().map(|g| g.to_vec()))
        })
        .collect();
    for &(_, _, id) in &weights {
        let t = model.params.get_mut(id);
        t.set_requires_grad(true);
        t.zero_grad();
    }

    let result = (|| {
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &ExpertBank::new(), &Gates::none(), subset)?;
        tape.backward(loss, &mut model.params)?;
        let mut sq: BTreeMap<(Module, usize), f64> = BTreeMap::new();
        for &(m, l, id) in &weights {
            let g = model.params.get(id).grad().unwrap_or(&[]);
            *sq.entry((m, l)).or_insert(0.0) += g.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(sq
            .into_iter()
            .map(|((module, layer), s)| LayerSensitivity {
                module,
                layer,
                grad_norm: libm::sqrt(s),
            })
            .collect::<Vec<_>>())
    })();

    for (&(_, _, id), (flag, grad)) in weights.iter().zip(saved) {
        let t = model.params.get_mut(id);
        t.set_requires_grad(flag);
        t.set_grad(grad)?;
    }
    Ok(Sensitivities::from_layers(result?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub r_llm: f64,
    pub r_vision: f64,
    pub b_llm: usize,
    pub b_vision: usize,
}

/// Splits `b_total` layer experts between the towers in proportion to their
/// difficulty scores. The vision share is rounded half-to-even and the LLM
/// gets the remainder, so the two budgets always sum to `b_total`.
pub fn split_budget(llm_score: f64, vision_score: f64, b_total: usize) -> Result<BudgetSplit> {
    if !(llm_score >= 0.0 && vision_score >= 0.0) || !llm_score.is_finite() || !vision_score.is_finite() {
        return Err(Error::contract(format!(
            "module scores must be finite and non-negative, got {llm_score} / {vision_score}"
        )));
    }
    let total = llm_score + vision_score;
    if total == 0.0 {
        return Err(Error::DegenerateScores);
    }
    let r_vision = vision_score / total;
    Ok(split_from_ratio(r_vision, b_total))
}

fn split_from_ratio(r_vision: f64, b_total: usize) -> BudgetSplit {
    // 1 - r is exact for r >= 0.5 and within half an ulp otherwise, so the
    // two ratios always add back to exactly 1.0.
    let r_llm = 1.0 - r_vision;
    let b_vision = (libm::rint(r_vision * b_total as f64) as usize).min(b_total);
    BudgetSplit {
        r_llm,
        r_vision,
        b_llm: b_total - b_vision,
        b_vision,
    }
}

/// [`split_budget`], falling back to an equal split (with a warning) when both
/// scores are zero. The flag reports whether the fallback fired.
pub fn split_budget_or_equal(llm_score: f64, vision_score: f64, b_total: usize) -> Result<(BudgetSplit, bool)> {
    match split_budget(llm_score, vision_score, b_total) {
        Ok(s) => Ok((s, false)),
        Err(Error::DegenerateScores) => {
            log::warn!("both module scores are zero; falling back to an equal budget split");
            Ok((split_from_ratio(0.5, b_total), true))
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulePlan {
    pub budget: usize,
    /// Layer indices, most sensitive first.
    pub ranked_layers: Vec<usize>,
    /// One 0/1 entry per layer.
    pub indicators: Vec<u8>,
    /// Expert rank per layer, 0 where no expert is placed.
    pub ranks: Vec<usize>,
    pub grad_norms: Vec<f64>,
}

impl ModulePlan {
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.indicators.iter().enumerate().filter(|(_, &i)| i == 1).map(|(l, _)| l)
    }

    pub fn allocated(&self) -> usize {
        self.indicators.iter().filter(|&&i| i == 1).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub task_id: TaskId,
    pub b_total: usize,
    pub r_llm: f64,
    pub r_vision: f64,
    /// Expert rank used for this task's layers.
    pub rank: usize,
    /// Set when the both-zero fallback split was used.
    pub degenerate: bool,
    pub llm: ModulePlan,
    pub vision: ModulePlan,
}

impl AllocationPlan {
    pub fn module(&self, m: Module) -> &ModulePlan {
        match m {
            Module::Llm => &self.llm,
            Module::Vision => &self.vision,
        }
    }

    pub fn total_allocated(&self) -> usize {
        self.llm.allocated() + self.vision.allocated()
    }

    /// Newly trainable parameters implied by this plan.
    pub fn trainable_params(&self, config: &ModelConfig) -> usize {
        Module::ALL
            .iter()
            .map(|&m| self.module(m).ranks.iter().map(|&r| config.expert_params(m, r)).sum::<usize>())
            .sum()
    }

    /// A plan from explicit per-module layer selections (used by baselines).
    pub fn from_selection(
        task_id: TaskId,
        config: &ModelConfig,
        rank: usize,
        llm_layers: &[usize],
        vision_layers: &[usize],
        sens: Option<&Sensitivities>,
    ) -> Self {
        let module_plan = |m: Module, chosen: &[usize]| {
            let n = config.layers(m);
            let mut indicators = vec![0u8; n];
            for &l in chosen {
                indicators[l] = 1;
            }
            ModulePlan {
                budget: chosen.len(),
                ranked_layers: chosen.to_vec(),
                ranks: indicators.iter().map(|&i| i as usize * rank).collect(),
                indicators,
                grad_norms: sens.map(|s| s.norms(m)).unwrap_or_default(),
            }
        };
        let llm = module_plan(Module::Llm, llm_layers);
        let vision = module_plan(Module::Vision, vision_layers);
        let b_total = llm.budget + vision.budget;
        let r_vision = if b_total == 0 { 0.0 } else { vision.budget as f64 / b_total as f64 };
        AllocationPlan {
            task_id,
            b_total,
            r_llm: 1.0 - r_vision,
            r_vision,
            rank,
            degenerate: false,
            llm,
            vision,
        }
    }
}

/// Layer indices sorted by gradient norm, descending; ties keep the lower index first.
pub fn rank_layers(norms: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx
}

/// Marks the top-`budget` ranked layers of each tower. A budget larger than
/// its tower is clamped and the overflow moved to the other tower when it has
/// room, keeping the total allocation equal to `b_llm + b_vision`.
pub fn allocate_layers(
    task_id: TaskId,
    config: &ModelConfig,
    sens: &Sensitivities,
    split: BudgetSplit,
    rank: usize,
) -> AllocationPlan {
    let (n_llm, n_vis) = (config.n_llm_layers, config.n_vision_layers);
    let mut b_llm = split.b_llm;
    let mut b_vis = split.b_vision;
    if b_vis > n_vis {
        log::warn!("vision budget {b_vis} exceeds {n_vis} layers; clamping");
        b_llm += b_vis - n_vis;
        b_vis = n_vis;
    }
    if b_llm > n_llm {
        log::warn!("llm budget {b_llm} exceeds {n_llm} layers; clamping");
        b_vis = (b_vis + (b_llm - n_llm)).min(n_vis);
        b_llm = n_llm;
    }
    let module_plan = |m: Module, budget: usize| {
        let norms = sens.norms(m);
        let ranked = rank_layers(&norms);
        let mut indicators = vec![0u8; norms.len()];
        for &l in ranked.iter().take(budget) {
            indicators[l] = 1;
        }
        ModulePlan {
            budget,
            ranked_layers: ranked,
            ranks: indicators.iter().map(|&i| i as usize * rank).collect(),
            indicators,
            grad_norms: norms,
        }
    };
    AllocationPlan {
        task_id,
        b_total: split.b_llm + split.b_vision,
        r_llm: split.r_llm,
        r_vision: split.r_vision,
        rank,
        degenerate: false,
        llm: module_plan(Module::Llm, b_llm),
        vision: module_plan(Module::Vision, b_vis),
    }
}

/// Largest per-layer `|ln(a_l / b_l)|` over both towers. Layers where either
/// norm is zero are skipped; `None` when no layer qualifies.
pub fn max_log_ratio(a: &Sensitivities, b: &Sensitivities) -> Option<f64> {
    a.layers
        .iter()
        .zip(&b.layers)
        .inspect(|(x, y)| debug_assert!(x.module == y.module && x.layer == y.layer))
        .filter(|(x, y)| x.grad_norm > 0.0 && y.grad_norm > 0.0)
        .map(|(x, y)| libm::fabs(libm::log(x.grad_norm / y.grad_norm)))
        .max_by(f64::total_cmp)
}

pub type EffectiveWeights = BTreeMap<(Module, usize, Slot), Vec<f64>>;

/// Per tower, `||after - before|| / ||before||` over the effective block weights.
pub fn relative_dynamics(before: &EffectiveWeights, after: &EffectiveWeights) -> Result<BTreeMap<Module, f64>> {
    if before.len() != after.len() || before.keys().zip(after.keys()).any(|(a, b)| a != b) {
        return Err(Error::contract("weight snapshots do not share the same parameter set"));
    }
    let mut diff: BTreeMap<Module, (f64, f64)> = BTreeMap::new();
    for (k, b) in before {
        let a = &after[k];
        if a.len() != b.len() {
            return Err(Error::contract(format!("weight {:?} changed shape", k)));
        }
        let e = diff.entry(k.0).or_insert((0.0, 0.0));
        for (x, y) in b.iter().zip(a) {
            e.0 += (y - x) * (y - x);
            e.1 += x * x;
        }
    }
    Ok(diff
        .into_iter()
        .map(|(m, (d, n))| (m, if n > 0.0 { libm::sqrt(d) / libm::sqrt(n) } else { 0.0 }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn sens(llm: &[f64], vision: &[f64]) -> Sensitivities {
        let mut layers = Vec::new();
        for (l, &g) in llm.iter().enumerate() {
            layers.push(LayerSensitivity {
                module: Module::Llm,
                layer: l,
                grad_norm: g,
            });
        }
        for (l, &g) in vision.iter().enumerate() {
            layers.push(LayerSensitivity {
                module: Module::Vision,
                layer: l,
                grad_norm: g,
            });
        }
        Sensitivities::from_layers(layers)
    }

    #[test]
    fn split_examples() {
        let s = split_budget(2.0, 2.0, 24).unwrap();
        assert_eq!((s.r_llm, s.r_vision, s.b_llm, s.b_vision), (0.5, 0.5, 12, 12));
        let s = split_budget(3.0, 1.0, 24).unwrap();
        assert_eq!((s.r_llm, s.r_vision, s.b_llm, s.b_vision), (0.75, 0.25, 18, 6));
        let s = split_budget(5.0, 0.0, 24).unwrap();
        assert_eq!((s.b_llm, s.b_vision), (24, 0));
        assert_eq!(split_budget(0.0, 0.0, 24), Err(Error::DegenerateScores));
        assert!(split_budget(-1.0, 1.0, 4).is_err());
    }

    #[test]
    fn rounding_is_half_to_even() {
        // r_vision = 0.5 of 5 -> 2.5 -> 2; 0.5 of 7 -> 3.5 -> 4
        assert_eq!(split_budget(1.0, 1.0, 5).unwrap().b_vision, 2);
        assert_eq!(split_budget(1.0, 1.0, 7).unwrap().b_vision, 4);
    }

    #[test]
    fn degenerate_scores_fall_back_to_equal_split() {
        let (s, fell_back) = split_budget_or_equal(0.0, 0.0, 24).unwrap();
        assert!(fell_back);
        assert_eq!((s.b_llm, s.b_vision), (12, 12));
    }

    #[test]
    fn allocation_examples() {
        let cfg = ModelConfig {
            n_llm_layers: 3,
            n_vision_layers: 3,
            ..ModelConfig::default()
        };
        let split = BudgetSplit {
            r_llm: 0.5,
            r_vision: 0.5,
            b_llm: 2,
            b_vision: 0,
        };
        let plan = allocate_layers(1, &cfg, &sens(&[0.5, 2.0, 1.0], &[1.0, 1.0, 1.0]), split, 8);
        assert_eq!(plan.llm.indicators, vec![0, 1, 1]);
        assert_eq!(plan.llm.ranked_layers, vec![1, 2, 0]);
        assert_eq!(plan.vision.indicators, vec![0, 0, 0]);

        let split = BudgetSplit {
            b_llm: 0,
            b_vision: 1,
            ..split
        };
        let plan = allocate_layers(1, &cfg, &sens(&[0.5, 2.0, 1.0], &[1.0, 1.0, 1.0]), split, 8);
        assert_eq!(plan.vision.indicators, vec![1, 0, 0]);
        assert_eq!(plan.llm.allocated(), 0);
    }

    #[test]
    fn overflowing_budget_moves_to_other_tower() {
        let cfg = ModelConfig::default(); // 6 llm, 4 vision
        let split = split_budget(0.0, 1.0, 5).unwrap();
        assert_eq!(split.b_vision, 5);
        let plan = allocate_layers(1, &cfg, &sens(&[1.0; 6], &[1.0; 4]), split, 8);
        assert_eq!(plan.vision.allocated(), 4);
        assert_eq!(plan.llm.allocated(), 1);
        assert_eq!(plan.total_allocated(), 5);
    }

    #[test]
    fn relative_dynamics_examples() {
        let mut before = EffectiveWeights::new();
        before.insert((Module::Llm, 0, Slot::W1), vec![1.0]);
        before.insert((Module::Vision, 0, Slot::W1), vec![2.0, -1.0]);
        let same = relative_dynamics(&before, &before).unwrap();
        assert_eq!(same[&Module::Llm], 0.0);
        assert_eq!(same[&Module::Vision], 0.0);

        let mut after = before.clone();
        after.insert((Module::Llm, 0, Slot::W1), vec![1.1]);
        let r = relative_dynamics(&before, &after).unwrap();
        assert!((r[&Module::Llm] - 0.1).abs() < 1e-12);
        assert_eq!(r[&Module::Vision], 0.0);

        let mut other = before.clone();
        other.insert((Module::Llm, 1, Slot::W2), vec![0.0]);
        assert!(relative_dynamics(&before, &other).is_err());
    }

    fn tiny_model() -> ToyMllm {
        let cfg = ModelConfig {
            d_v: 3,
            d_t: 4,
            n_vision_layers: 1,
            n_llm_layers: 1,
            n_vision_tokens: 2,
            n_text_tokens: 2,
            n_classes: 3,
            lora_rank: 2,
        };
        let mut m = ToyMllm::new(cfg, &mut seed::rng(21)).unwrap();
        m.params.set_requires_grad_all(false);
        m
    }

    fn tiny_batch(m: &ToyMllm, n: usize) -> Batch {
        let d = m.config.token_dims();
        let mut rng = seed::rng(22);
        Batch {
            dims: d,
            vision: seed::normal_vec(&mut rng, n * d.vision_len(), 1.0),
            text: seed::normal_vec(&mut rng, n * d.text_len(), 1.0),
            labels: (0..n).map(|i| i % 3).collect(),
        }
    }

    #[test]
    fn norms_match_finite_differences() {
        let mut m = tiny_model();
        let batch = tiny_batch(&m, 6);
        let s = compute_sensitivities(&mut m, &batch).unwrap();
        let h = 1e-5;
        for module in Module::ALL {
            let block = m.blocks(module)[0];
            let mut sq = 0.0;
            for slot in Slot::ALL {
                let id = block.weight(slot);
                for i in 0..m.params.get(id).numel() {
                    let orig = m.params.get(id).data()[i];
                    m.params.get_mut(id).data_mut()[i] = orig + h;
                    let up = m.batch_loss(&ExpertBank::new(), &Gates::none(), &batch).unwrap();
                    m.params.get_mut(id).data_mut()[i] = orig - h;
                    let dn = m.batch_loss(&ExpertBank::new(), &Gates::none(), &batch).unwrap();
                    m.params.get_mut(id).data_mut()[i] = orig;
                    let g = (up - dn) / (2.0 * h);
                    sq += g * g;
                }
            }
            let fd = libm::sqrt(sq);
            let ad = s.norms(module)[0];
            assert!((ad - fd).abs() / fd.max(1e-12) < 1e-3, "{module:?}: {ad} vs {fd}");
        }
    }

    #[test]
    fn flat_loss_gives_zero_norms() {
        let mut m = tiny_model();
        let head = m.head_w;
        m.params.get_mut(head).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let batch = tiny_batch(&m, 4);
        let s = compute_sensitivities(&mut m, &batch).unwrap();
        assert!(s.layers.iter().all(|l| l.grad_norm == 0.0));
        assert_eq!(s.llm.score, 0.0);
    }

    #[test]
    fn duplicated_subset_gives_same_norms() {
        let mut m = tiny_model();
        let batch = tiny_batch(&m, 5);
        let twice = Batch {
            dims: batch.dims,
            vision: [batch.vision.clone(), batch.vision.clone()].concat(),
            text: [batch.text.clone(), batch.text.clone()].concat(),
            labels: [batch.labels.clone(), batch.labels.clone()].concat(),
        };
        let a = compute_sensitivities(&mut m, &batch).unwrap();
        let b = compute_sensitivities(&mut m, &twice).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert!((x.grad_norm - y.grad_norm).abs() <= 1e-12 * x.grad_norm.max(1.0));
        }
    }

    #[test]
    fn sensitivity_pass_restores_flags_and_grads() {
        let mut m = tiny_model();
        let w = m.llm[0].w1;
        m.params.get_mut(w).set_grad(Some(vec![7.0; 16])).unwrap();
        let before = m.clone();
        let batch = tiny_batch(&m, 3);
        compute_sensitivities(&mut m, &batch).unwrap();
        assert_eq!(m, before);
        let empty = Batch {
            labels: Vec::new(),
            vision: Vec::new(),
            text: Vec::new(),
            dims: m.config.token_dims(),
        };
        assert!(compute_sensitivities(&mut m, &empty).is_err());
    }

    #[test]
    fn module_score_squares_sum_layer_norms() {
        let s = sens(&[3.0, 4.0], &[1.0]);
        assert_eq!(s.llm.score, 5.0);
        assert_eq!(s.vision.score, 1.0);
    }

    proptest! {
        #[test]
        fn budget_conservation_and_normalization(
            llm in 0.0f64..1e3, vision in 0.0f64..1e3, b_total in 0usize..64
        ) {
            prop_assume!(llm + vision > 0.0);
            let s = split_budget(llm, vision, b_total).unwrap();
            prop_assert_eq!(s.r_llm + s.r_vision, 1.0);
            prop_assert_eq!(s.b_llm + s.b_vision, b_total);
        }

        #[test]
        fn raising_a_score_never_lowers_its_budget(
            llm in 1e-3f64..1e3, vision in 1e-3f64..1e3, bump in 0.0f64..1e3, b_total in 0usize..64
        ) {
            let a = split_budget(llm, vision, b_total).unwrap();
            let b = split_budget(llm + bump, vision, b_total).unwrap();
            prop_assert!(b.b_llm >= a.b_llm);
            let c = split_budget(llm, vision + bump, b_total).unwrap();
            prop_assert!(c.b_vision >= a.b_vision);
        }

        #[test]
        fn indicators_match_budgets(
            llm in proptest::collection::vec(0.0f64..10.0, 6),
            vision in proptest::collection::vec(0.0f64..10.0, 4),
            r in 0.0f64..=1.0, b_total in 0usize..=10
        ) {
            let split = split_from_ratio(r, b_total);
            let plan = allocate_layers(1, &ModelConfig::default(), &sens(&llm, &vision), split, 8);
            prop_assert_eq!(plan.total_allocated(), b_total);
            prop_assert_eq!(plan.llm.allocated(), plan.llm.budget);
            prop_assert_eq!(plan.vision.allocated(), plan.vision.budget);
            // selected layers outrank unselected ones
            for m in Module::ALL {
                let p = plan.module(m);
                for l in p.selected() {
                    for (k, &ind) in p.indicators.iter().enumerate() {
                        if ind == 0 {
                            prop_assert!(p.grad_norms[l] >= p.grad_norms[k]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn log_ratio_takes_the_widest_layer() {
        let sens = |norms: [f64; 3]| {
            Sensitivities::from_layers(
                norms
                    .iter()
                    .enumerate()
                    .map(|(layer, &g)| LayerSensitivity { module: Module::Llm, layer, grad_norm: g })
                    .collect(),
            )
        };
        let r = max_log_ratio(&sens([1.0, 2.0, 0.0]), &sens([1.0, 0.5, 3.0])).unwrap();
        assert!((r - libm::log(4.0)).abs() < 1e-15);
        assert_eq!(max_log_ratio(&sens([0.0; 3]), &sens([1.0; 3])), None);
    }
}
