//! Whole-stream audits: frozen parameters stay bit-identical, prior training
//! data is never read again, new experts start neutral, and every strategy
//! trains about the same number of parameters per task.

use std::cell::Cell;
use std::rc::Rc;

use dmole_core::data::{GeneratorConfig, StreamPreset};
use dmole_core::model::{ModelConfig, Module};
use dmole_core::trainer::{prepare_stream, Strategy, TrainConfig};

#[path = "support/poisoned.rs"]
mod poisoned;

use poisoned::Poisoned;

fn small_preset(seed: u64) -> StreamPreset {
    let gen = GeneratorConfig {
        n_train: 200,
        n_test: 100,
        ..GeneratorConfig::default()
    };
    StreamPreset::heterogeneous5(seed, ModelConfig::default().token_dims(), gen)
}

fn quick_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.fit.epochs = 2;
    c.pretrain.epochs = 2;
    c.autoencoder.epochs = 10;
    c
}

#[test]
fn prior_task_data_is_never_read_again() {
    let preset = small_preset(3);
    for strategy in Strategy::ALL {
        let (mut state, trains) = prepare_stream(&preset, ModelConfig::default(), strategy, quick_config(), 3).unwrap();
        let late = Rc::new(Cell::new(0));
        let mut guards = Vec::new();
        for (spec, train) in preset.tasks.iter().zip(trains) {
            let poisoned = Rc::new(Cell::new(false));
            let reads = Rc::new(Cell::new(0));
            let data = Poisoned {
                inner: train,
                poisoned: poisoned.clone(),
                reads: reads.clone(),
                late_reads: late.clone(),
            };
            state.run_task(spec, &data).unwrap();
            assert!(reads.get() > 0, "{strategy}: task {} was never read", spec.task_id);
            poisoned.set(true);
            // kept alive on purpose: a retained handle would now read NaNs
            guards.push(data);
        }
        assert_eq!(late.get(), 0, "{strategy}: poisoned data was read");
        assert!(state.scores.rows.iter().flatten().all(|a| a.is_finite()));
    }
}

#[test]
fn frozen_parameters_are_bit_identical_across_every_task() {
    let preset = small_preset(4);
    for strategy in Strategy::ALL {
        let (mut state, trains) = prepare_stream(&preset, ModelConfig::default(), strategy, quick_config(), 4).unwrap();
        for (spec, train) in preset.tasks.iter().zip(trains) {
            let before = state.model.params.clone();
            let t = spec.task_id;
            state.run_task(spec, &train).unwrap();
            // the experts trained for this task: its own, or the shared seq-FT set
            let owner = if strategy == Strategy::SeqFt { preset.tasks[0].task_id } else { t };
            let trained: Vec<_> = state.bank.params_of_task(owner);
            for (id, name, tensor) in before.iter() {
                if trained.contains(&id) {
                    continue;
                }
                let after = state.model.params.get(id);
                let same = tensor.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "{strategy}: '{name}' changed while training task {t}");
            }
        }
        assert!(state.freeze_violations().is_empty(), "{strategy}");
        for r in &state.records {
            assert_eq!(r.frozen_checksum_before, r.frozen_checksum_after);
        }
    }
}

#[test]
fn fresh_experts_leave_the_loss_unchanged() {
    let preset = small_preset(5);
    for strategy in [Strategy::Dmole, Strategy::SparseMole, Strategy::Mola] {
        let (mut state, trains) = prepare_stream(&preset, ModelConfig::default(), strategy, quick_config(), 5).unwrap();
        for (spec, train) in preset.tasks.iter().zip(trains) {
            let rec = state.run_task(spec, &train).unwrap();
            assert_eq!(rec.zero_init_gap, 0.0, "{strategy} task {}", spec.task_id);
        }
    }
}

#[test]
fn trainable_parameters_match_across_strategies() {
    let preset = small_preset(6);
    let cfg = ModelConfig::default();
    // one expert of the widest kind
    let slack = Module::ALL.iter().map(|&m| cfg.expert_params(m, cfg.lora_rank)).max().unwrap();
    let mut per_strategy = Vec::new();
    for strategy in Strategy::ALL {
        let (mut state, trains) = prepare_stream(&preset, cfg, strategy, quick_config(), 6).unwrap();
        for (spec, train) in preset.tasks.iter().zip(trains) {
            state.run_task(spec, &train).unwrap();
        }
        let counts: Vec<usize> = state.records.iter().map(|r| r.trainable_params).collect();
        for r in &state.records {
            assert_eq!(r.trainable_params, r.plan.trainable_params(&cfg), "{strategy}");
        }
        per_strategy.push((strategy, counts));
    }
    for t in 0..preset.tasks.len() {
        let col: Vec<usize> = per_strategy.iter().map(|(_, c)| c[t]).collect();
        let (lo, hi) = (col.iter().min().unwrap(), col.iter().max().unwrap());
        assert!(hi - lo <= slack, "task {t}: {per_strategy:?}");
    }
}

#[test]
fn same_seed_same_stream() {
    let preset = small_preset(7);
    let run = || {
        let (mut state, trains) = prepare_stream(&preset, ModelConfig::default(), Strategy::Dmole, quick_config(), 7).unwrap();
        for (spec, train) in preset.tasks.iter().zip(trains) {
            state.run_task(spec, &train).unwrap();
        }
        state
    };
    let (a, b) = (run(), run());
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.records, b.records);
    let ids: Vec<_> = a.model.params.ids().collect();
    assert_eq!(a.model.checksum(&ids), b.model.checksum(&ids));
}
