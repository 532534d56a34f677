use dmole_core::model::{ModelConfig, Module};
use dmole_core::proxy::{allocate_layers, split_budget};
use dmole_core::seed;
use rand::Rng as _;

#[path = "support/random_sens.rs"]
mod random_sens;

use random_sens::random_sensitivities;

#[test]
fn two_hundred_random_splits_conserve_the_budget() {
    let cfg = ModelConfig::default();
    let mut rng = seed::rng(77);
    let mut checked = 0;
    while checked < 200 {
        let sens = random_sensitivities(&cfg, &mut rng);
        if sens.llm.score == 0.0 && sens.vision.score == 0.0 {
            continue;
        }
        let b_total = rng.random_range(0..=cfg.total_layers());
        let split = split_budget(sens.llm.score, sens.vision.score, b_total).unwrap();
        assert_eq!(split.r_llm + split.r_vision, 1.0);
        assert_eq!(split.b_llm + split.b_vision, b_total);

        let plan = allocate_layers(1, &cfg, &sens, split, cfg.lora_rank);
        assert_eq!(plan.total_allocated(), b_total);
        // without overflow each tower gets exactly its budget
        if split.b_llm <= cfg.n_llm_layers && split.b_vision <= cfg.n_vision_layers {
            assert_eq!(plan.llm.allocated(), split.b_llm);
            assert_eq!(plan.vision.allocated(), split.b_vision);
        }
        for m in Module::ALL {
            let p = plan.module(m);
            assert_eq!(p.allocated(), p.budget);
            assert!(p.indicators.iter().all(|&i| i <= 1));
        }
        checked += 1;
    }
}

#[test]
fn zero_vision_score_gives_vision_nothing() {
    let cfg = ModelConfig::default();
    for b_total in 0..=cfg.n_llm_layers {
        let split = split_budget(2.5, 0.0, b_total).unwrap();
        assert_eq!((split.b_llm, split.b_vision), (b_total, 0));
    }
}
