//! Randomized gradient-check trials shared by the gradcheck and acceptance
//! targets.

use dmole_core::data::Batch;
use dmole_core::model::{ExpertBank, Gates, ModelConfig, Module, ToyMllm};
use dmole_core::nn::gradcheck::{all_coords, GradCheck, GradCheckReport};
use dmole_core::nn::{ParamId, ParamStore, Tape, Var};
use dmole_core::seed::{self, Rng};
use dmole_core::Result;
use rand::Rng as _;

fn random_param(store: &mut ParamStore, rng: &mut Rng, name: &str, rows: usize, cols: usize) -> ParamId {
    let data = seed::normal_vec(rng, rows * cols, 1.0);
    store.insert(name, dmole_core::nn::Tensor::matrix(rows, cols, data).unwrap())
}

/// `sum(out * r)` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var, r: &[f64]) -> Result<Var> {
    let (m, n) = tape.dims(out);
    let w = tape.input_matrix(m, n, r.to_vec())?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

pub struct Case {
    pub name: &'static str,
    pub smooth: bool,
}

pub const CASES: [Case; 14] = [
    Case { name: "matmul", smooth: true },
    Case { name: "add", smooth: true },
    Case { name: "sub", smooth: true },
    Case { name: "mul", smooth: true },
    Case { name: "mul_self", smooth: true },
    Case { name: "add_bias", smooth: true },
    Case { name: "scale", smooth: true },
    Case { name: "relu", smooth: false },
    Case { name: "max_pool", smooth: false },
    Case { name: "mean_pool", smooth: true },
    Case { name: "mean", smooth: true },
    Case { name: "sum", smooth: true },
    Case { name: "prepend_rows", smooth: true },
    Case { name: "softmax_cross_entropy", smooth: true },
];

pub fn primitive_trial(case: &Case, trial: u64) -> GradCheckReport {
    let mut rng = seed::derived_rng(trial, case.name, 0);
    let m = rng.random_range(1..5usize);
    let k = rng.random_range(1..5usize);
    let n = rng.random_range(1..5usize);
    let group = rng.random_range(1..4usize);
    let mut store = ParamStore::new();
    let a = random_param(&mut store, &mut rng, "a", m, k);
    let (b, rows_out, cols_out) = match case.name {
        "matmul" => (Some(random_param(&mut store, &mut rng, "b", k, n)), m, n),
        "add" | "sub" | "mul" => (Some(random_param(&mut store, &mut rng, "b", m, k)), m, k),
        "add_bias" => (Some(random_param(&mut store, &mut rng, "b", 1, k)), m, k),
        _ => (None, m, k),
    };
    // pooling and prefix ops need a row count divisible by the group
    let pooled = match case.name {
        "max_pool" | "mean_pool" => Some(random_param(&mut store, &mut rng, "p", m * group, k)),
        "prepend_rows" => Some(random_param(&mut store, &mut rng, "p", m * group, k)),
        _ => None,
    };
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let r = seed::normal_vec(&mut rng, (m * (group + 1)).max(rows_out) * cols_out.max(k), 1.0);
    let factor = seed::normal(&mut rng);
    let ids: Vec<ParamId> = [Some(a), b, pooled].into_iter().flatten().collect();
    let coords = all_coords(&store, &ids);

    GradCheck::default()
        .run(&mut store, &ids, &coords, |tape, store| {
            let va = tape.param(store, a)?;
            let vb = b.map(|b| tape.param(store, b)).transpose()?;
            let vp = pooled.map(|p| tape.param(store, p)).transpose()?;
            let out = match case.name {
                "matmul" => tape.matmul(va, vb.unwrap())?,
                "add" => tape.add(va, vb.unwrap())?,
                "sub" => tape.sub(va, vb.unwrap())?,
                "mul" => tape.mul(va, vb.unwrap())?,
                "mul_self" => tape.mul(va, va)?,
                "add_bias" => tape.add_bias(va, vb.unwrap())?,
                "scale" => tape.scale(va, factor)?,
                "relu" => tape.relu(va)?,
                "max_pool" => tape.max_pool(vp.unwrap(), group)?,
                "mean_pool" => tape.mean_pool(vp.unwrap(), group)?,
                "mean" => {
                    let x = tape.mul(va, va)?;
                    return tape.mean(x);
                }
                "sum" => {
                    let x = weighted_sum(tape, va, &r[..m * k])?;
                    return tape.sum(x);
                }
                "prepend_rows" => tape.prepend_rows(va, vp.unwrap(), group)?,
                "softmax_cross_entropy" => return tape.softmax_cross_entropy(va, &labels),
                other => unreachable!("{other}"),
            };
            let (rows, cols) = tape.dims(out);
            weighted_sum(tape, out, &r[..rows * cols])
        })
        .unwrap()
}

fn tiny_config(rng: &mut Rng) -> ModelConfig {
    ModelConfig {
        d_v: rng.random_range(3..6),
        d_t: rng.random_range(4..7),
        n_vision_layers: rng.random_range(1..3),
        n_llm_layers: rng.random_range(1..3),
        n_vision_tokens: rng.random_range(1..4),
        n_text_tokens: rng.random_range(1..4),
        n_classes: 3,
        lora_rank: 2,
    }
}

/// A randomly sized model with two tasks' experts on random layers, B factors
/// randomized so every LoRA path carries gradient.
pub fn model_trial(trial: u64) -> GradCheckReport {
    let mut rng = seed::derived_rng(trial, "model-gradcheck", 0);
    let cfg = tiny_config(&mut rng);
    let mut model = ToyMllm::new(cfg, &mut rng).unwrap();
    let mut bank = ExpertBank::new();
    for task in [1, 2] {
        for m in Module::ALL {
            for l in 0..cfg.layers(m) {
                if rng.random_bool(0.6) {
                    bank.allocate(&mut model, m, l, task, cfg.lora_rank, &mut rng).unwrap();
                }
            }
        }
    }
    let experts: Vec<ParamId> = bank.experts().map(|e| e.b).collect();
    for id in experts {
        let t = model.params.get_mut(id);
        let n = t.numel();
        t.data_mut().copy_from_slice(&seed::normal_vec(&mut rng, n, 0.3));
    }
    let gates = Gates::of([1, 2].into_iter().filter(|&t| bank.has_task(t) && rng.random_bool(0.8)));
    let n = 3;
    let d = cfg.token_dims();
    let batch = Batch {
        dims: d,
        vision: seed::normal_vec(&mut rng, n * d.vision_len(), 1.0),
        text: seed::normal_vec(&mut rng, n * d.text_len(), 1.0),
        labels: (0..n).map(|i| i % 3).collect(),
    };

    let ids: Vec<ParamId> = model.params.ids().collect();
    let coords = all_coords(&model.params, &ids);
    let mut store = model.params.clone();
    GradCheck::default()
        .run(&mut store, &ids, &coords, |tape, store| {
            let view = ToyMllm::from_store(cfg, store.clone())?;
            view.loss(tape, &bank, &gates, &batch)
        })
        .unwrap()
}

