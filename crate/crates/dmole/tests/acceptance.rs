//! Acceptance suite: one line per criterion, measured at the default
//! configuration. Runs as a plain binary so the lines always show.
//!
//! Criteria listed in `KNOWN_RED` are reported as FAIL without failing the
//! target; any other failure exits non-zero.

use std::cell::Cell;
use std::rc::Rc;
use std::time::Instant;

use dmole::config::RunConfig;
use dmole::rundir::LoadedRun;
use dmole::{checkpoint, run, sweep};
use dmole_core::data::{self, GeneratorConfig, StreamPreset};
use dmole_core::metrics::{format_metric, ScoreMatrix};
use dmole_core::model::{ModelConfig, ToyMllm};
use dmole_core::nn::gradcheck::GradCheckReport;
use dmole_core::proxy::{allocate_layers, compute_sensitivities, max_log_ratio, split_budget, Sensitivities};
use dmole_core::seed;
use dmole_core::trainer::{prepare_stream, pretrained_backbone, StreamState, Strategy, TrainConfig};
use rand::Rng as _;

#[path = "../../core/tests/support/grad_cases.rs"]
mod grad_cases;
#[path = "../../core/tests/support/poisoned.rs"]
mod poisoned;
#[path = "../../core/tests/support/random_sens.rs"]
mod random_sens;
#[path = "../../core/tests/support/score_oracle.rs"]
mod score_oracle;

use poisoned::Poisoned;

/// Left red after investigation; see the README.
const KNOWN_RED: [u32; 2] = [5, 7];

const STREAM_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: u32, title: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, title, pass, detail }
}

fn gradients() -> Verdict {
    let t0 = Instant::now();
    let mut total = GradCheckReport::default();
    let mut trials = 0;
    // a smooth primitive reporting a kink is a bug, not a skip
    let mut false_kinks = 0;
    for case in &grad_cases::CASES {
        for trial in 0..8 {
            let rep = grad_cases::primitive_trial(case, trial);
            if case.smooth {
                false_kinks += rep.non_smooth;
            }
            total.merge(&rep);
            trials += 1;
        }
    }
    for trial in 0..24 {
        total.merge(&grad_cases::model_trial(trial));
        trials += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient correctness",
        total.max_rel_error < 1e-4 && false_kinks == 0 && trials >= 100 && secs < 60.0,
        format!(
            "max rel error {:.2e} over {trials} trials ({} coordinates, {} at kinks skipped), {secs:.1}s",
            total.max_rel_error, total.checked, total.non_smooth
        ),
    )
}

fn metrics() -> Verdict {
    let mut rng = seed::rng(2024);
    let mut bad = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=6usize);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let m = ScoreMatrix::from_rows(rows.clone()).unwrap();
        let o = score_oracle::OneBased::new(&rows);
        for i in 1..=n {
            let (a, l, b) = (m.avg(i - 1).unwrap(), m.last(i - 1).unwrap(), m.bwt(i - 1).unwrap());
            worst = worst.max((a - o.avg(i)).abs()).max((l - o.last(i)).abs());
            let ok_b = match (b, o.bwt(i)) {
                (Some(x), Some(y)) => {
                    worst = worst.max((x - y).abs());
                    score_oracle::close(x, y)
                }
                (None, None) => format_metric(b) == "-",
                _ => false,
            };
            if !(score_oracle::close(a, o.avg(i)) && l == o.last(i) && ok_b) {
                bad += 1;
            }
        }
    }
    verdict(2, "metric oracle", bad == 0, format!("100 matrices, {bad} mismatches, max abs diff {worst:.1e}"))
}

fn budgets() -> Verdict {
    let cfg = ModelConfig::default();
    let mut rng = seed::rng(77);
    let (mut checked, mut bad) = (0, 0);
    while checked < 200 {
        let sens = random_sens::random_sensitivities(&cfg, &mut rng);
        if sens.llm.score == 0.0 && sens.vision.score == 0.0 {
            continue;
        }
        let b_total = rng.random_range(0..=cfg.total_layers());
        let split = split_budget(sens.llm.score, sens.vision.score, b_total).unwrap();
        let plan = allocate_layers(1, &cfg, &sens, split, cfg.lora_rank);
        let fits = split.b_llm <= cfg.n_llm_layers && split.b_vision <= cfg.n_vision_layers;
        let ok = split.r_llm + split.r_vision == 1.0
            && split.b_llm + split.b_vision == b_total
            && plan.total_allocated() == b_total
            && (!fits || (plan.llm.allocated() == split.b_llm && plan.vision.allocated() == split.b_vision));
        bad += usize::from(!ok);
        checked += 1;
    }
    verdict(3, "budget invariants", bad == 0, format!("{checked} random splits, {bad} violations"))
}

fn full_split_sensitivities(preset: &StreamPreset, seed: u64) -> Vec<Sensitivities> {
    let cfg = ModelConfig::default();
    let model = pretrained_backbone(cfg, &preset.generic, TrainConfig::default().pretrain, seed).unwrap();
    preset
        .tasks
        .iter()
        .map(|spec| {
            let ds = data::generate(spec).unwrap();
            let mut m: ToyMllm = model.clone();
            compute_sensitivities(&mut m, &ds.train.all()).unwrap()
        })
        .collect()
}

fn layer_conflict() -> Verdict {
    let t0 = Instant::now();
    let dims = ModelConfig::default().token_dims();
    let gen = GeneratorConfig::default();
    let threshold_het = 1.5f64.ln();
    let threshold_twin = 1.2f64.ln();
    let (mut het_ok, mut twin_ok) = (0, 0);
    let (mut het, mut twin) = (Vec::new(), Vec::new());
    for s in 0..10 {
        let sens = full_split_sensitivities(&StreamPreset::heterogeneous5(s, dims, gen), s);
        let mut weakest = f64::INFINITY;
        for i in 0..sens.len() {
            for j in i + 1..sens.len() {
                weakest = weakest.min(max_log_ratio(&sens[i], &sens[j]).unwrap_or(0.0));
            }
        }
        het_ok += usize::from(weakest > threshold_het);
        het.push(weakest.exp());

        let sens = full_split_sensitivities(&StreamPreset::by_name("twin-pair", s, dims, gen).unwrap(), s);
        let r = max_log_ratio(&sens[0], &sens[1]).unwrap_or(0.0);
        twin_ok += usize::from(r < threshold_twin);
        twin.push(r.exp());
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    verdict(
        4,
        "layer gradient-norm conflict",
        het_ok >= 9 && twin_ok >= 9 && t0.elapsed().as_secs_f64() < 300.0,
        format!(
            "heterogeneous-5 {het_ok}/10 seeds with every pair above 1.5x (weakest pair ratio [{}]); \
             twin-pair {twin_ok}/10 below 1.2x ([{}]); {:.1}s",
            fmt(&het),
            fmt(&twin),
            t0.elapsed().as_secs_f64()
        ),
    )
}

struct StreamRun {
    strategy: Strategy,
    state: StreamState,
    late_reads: usize,
    /// Bytes of every parameter that existed before task t, compared after t.
    frozen_mismatches: usize,
}

fn stream_run(strategy: Strategy, s: u64) -> StreamRun {
    let cfg = RunConfig {
        strategy,
        seed: s,
        ..RunConfig::default()
    };
    let preset = cfg.stream().unwrap();
    let (mut state, trains) = prepare_stream(&preset, cfg.model, strategy, cfg.train_config(), s).unwrap();
    let late = Rc::new(Cell::new(0));
    let mut guards = Vec::new();
    let mut frozen_mismatches = 0;
    for (spec, train) in preset.tasks.iter().zip(trains) {
        let before = state.model.params.clone();
        let owner = if strategy == Strategy::SeqFt { preset.tasks[0].task_id } else { spec.task_id };
        let data = Poisoned {
            inner: train,
            poisoned: Rc::new(Cell::new(false)),
            reads: Rc::new(Cell::new(0)),
            late_reads: late.clone(),
        };
        state.run_task(spec, &data).unwrap();
        data.poisoned.set(true);
        guards.push(data);
        let trained = state.bank.params_of_task(owner);
        for (id, _, t) in before.iter() {
            let after = state.model.params.get(id);
            if !trained.contains(&id) && t.data().iter().zip(after.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                frozen_mismatches += 1;
            }
        }
    }
    StreamRun {
        strategy,
        state,
        late_reads: late.get(),
        frozen_mismatches,
    }
}

fn signum(x: f64) -> i32 {
    (x > 0.0) as i32 - (x < 0.0) as i32
}

fn modality(runs: &[StreamRun], presets: &[StreamPreset]) -> Verdict {
    let mut seed_hits = Vec::new();
    for (r, p) in runs.iter().filter(|r| r.strategy == Strategy::Dmole).zip(presets) {
        let hits = r
            .state
            .records
            .iter()
            .zip(&p.tasks)
            .filter(|(rec, spec)| {
                let s = &rec.sensitivities;
                signum(s.vision.score - s.llm.score) == signum(spec.modality_mix - 0.5)
            })
            .count();
        seed_hits.push(hits);
    }
    let good = seed_hits.iter().filter(|&&h| h >= 4).count();
    verdict(
        5,
        "modality imbalance sign",
        good * 2 > seed_hits.len(),
        format!("tasks with matching sign per seed {seed_hits:?} (need >= 4 of 5 in a majority of seeds)"),
    )
}

fn routing(runs: &[StreamRun]) -> Verdict {
    let mut top1 = Vec::new();
    let mut reject = Vec::new();
    for r in runs.iter().filter(|r| r.strategy == Strategy::Dmole) {
        let ev = r.state.evaluations.last().unwrap();
        let t: Vec<f64> = ev.tasks.iter().filter_map(|t| t.top1_accuracy).collect();
        top1.push(t.iter().sum::<f64>() / t.len() as f64);
        reject.push(ev.unseen.as_ref().unwrap().fallback_rate);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&top1), mean(&reject));
    verdict(
        6,
        "routing quality",
        a >= 0.90 && b >= 0.80,
        format!("top-1 {a:.3}, unseen rejection {b:.3} at scale 1.2, over {} seeds", top1.len()),
    )
}

fn ordering(runs: &[StreamRun], secs: f64) -> Verdict {
    let mean_of = |s: Strategy, f: &dyn Fn(&StreamState) -> f64| {
        let v: Vec<f64> = runs.iter().filter(|r| r.strategy == s).map(|r| f(&r.state)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let avg = |s| mean_of(s, &|st: &StreamState| st.scores.summary().unwrap().mean_avg);
    let bwt = |s| mean_of(s, &|st: &StreamState| st.scores.summary().unwrap().mean_bwt.unwrap());
    let d = avg(Strategy::Dmole);
    let bwt_ok = bwt(Strategy::Dmole) > bwt(Strategy::SeqFt);
    let rivals = [Strategy::DenseMole, Strategy::SparseMole, Strategy::Mola];
    let avg_ok = rivals.iter().all(|&s| d >= avg(s));
    let table: Vec<String> = Strategy::ALL
        .iter()
        .map(|&s| format!("{s} avg {:.3} bwt {:+.3}", avg(s), bwt(s)))
        .collect();
    verdict(
        7,
        "continual-learning ordering",
        bwt_ok && avg_ok && secs < 1800.0,
        format!("BWT dmole > seq_ft: {bwt_ok}; Average dmole >= rest: {avg_ok}; [{}]; {secs:.0}s", table.join(", ")),
    )
}

fn freeze(runs: &[StreamRun]) -> Verdict {
    let dm: Vec<&StreamRun> = runs.iter().filter(|r| r.strategy == Strategy::Dmole).collect();
    let bytes: usize = dm.iter().map(|r| r.frozen_mismatches).sum();
    let sums = dm
        .iter()
        .flat_map(|r| &r.state.records)
        .filter(|rec| rec.frozen_checksum_before != rec.frozen_checksum_after)
        .count();
    let all: usize = runs.iter().map(|r| r.frozen_mismatches + r.state.freeze_violations().len()).sum();
    verdict(
        8,
        "freeze invariance",
        bytes == 0 && sums == 0 && all == 0,
        format!(
            "dmole: {bytes} changed frozen tensors, {sums} checksum mismatches over {} tasks; all strategies: {all}",
            dm.iter().map(|r| r.state.records.len()).sum::<usize>()
        ),
    )
}

fn thresholds() -> Verdict {
    let tmp = tempfile::TempDir::new().unwrap();
    let out = run::execute(&RunConfig::default(), tmp.path(), false).unwrap();
    let loaded = LoadedRun::open(tmp.path()).unwrap();
    let (state, _) = checkpoint::load(&loaded).unwrap();
    let rows = sweep::sweep(&state, &[0.5, 1.0, 2.0]).unwrap();
    let lasts: Vec<f64> = rows.iter().map(|r| r.average_last).collect();
    let spread = lasts.iter().cloned().fold(f64::MIN, f64::max) - lasts.iter().cloned().fold(f64::MAX, f64::min);
    let exact = &rows[1].evaluation == out.state.evaluations.last().unwrap();
    verdict(
        9,
        "threshold insensitivity",
        spread < 0.05 && exact,
        format!(
            "average Last at 0.5/1/2x: {:.4} {:.4} {:.4} (spread {:.1} points); 1x equals the recorded evaluation: {exact}",
            lasts[0],
            lasts[1],
            lasts[2],
            spread * 100.0
        ),
    )
}

fn neutrality(runs: &[StreamRun]) -> Verdict {
    let gap = runs
        .iter()
        .flat_map(|r| &r.state.records)
        .map(|rec| rec.zero_init_gap)
        .fold(0.0, f64::max);
    let late: usize = runs.iter().map(|r| r.late_reads).sum();
    verdict(
        10,
        "zero-init neutrality and no replay",
        gap <= f64::EPSILON && late == 0,
        format!("max gated-on vs gated-off loss gap {gap:e}; {late} reads of poisoned earlier-task data over {} runs", runs.len()),
    )
}

fn main() {
    // `cargo test -- <filter>` passes arguments; run everything regardless
    let mut verdicts = vec![gradients(), metrics(), budgets(), layer_conflict()];

    let t0 = Instant::now();
    let mut runs = Vec::new();
    let mut presets = Vec::new();
    for &s in &STREAM_SEEDS {
        presets.push(RunConfig { seed: s, ..RunConfig::default() }.stream().unwrap());
        for strategy in Strategy::ALL {
            runs.push(stream_run(strategy, s));
        }
    }
    let secs = t0.elapsed().as_secs_f64();

    verdicts.push(modality(&runs, &presets));
    verdicts.push(routing(&runs));
    verdicts.push(ordering(&runs, secs));
    verdicts.push(freeze(&runs));
    verdicts.push(thresholds());
    verdicts.push(neutrality(&runs));

    let mut unexpected = 0;
    println!();
    for v in &verdicts {
        let status = match (v.pass, KNOWN_RED.contains(&v.id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("criterion {:>2} {:<36} {status}: {}", v.id, v.title, v.detail);
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("\nacceptance: {passed}/{} criteria pass", verdicts.len());
    if unexpected > 0 {
        std::process::exit(1);
    }
}
