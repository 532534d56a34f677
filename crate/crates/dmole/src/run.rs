//! Executes a configured stream into a run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dmole_core::data::StreamPreset;
use dmole_core::model::Module;
use dmole_core::trainer::{prepare_stream, StreamState};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::report::{self, ReportInputs};
use crate::rundir::{Manifest, RunDir, RunStatus};

/// Called after every task with the state so far; an `Err` aborts the run as
/// a failure with the given message.
pub type AfterTask<'a> = dyn FnMut(&StreamState) -> std::result::Result<(), String> + 'a;

#[derive(Debug)]
pub struct RunOutcome {
    pub root: PathBuf,
    pub state: StreamState,
    pub preset: StreamPreset,
    pub manifest: Manifest,
}

impl RunOutcome {
    pub fn warnings(&self) -> &[String] {
        &self.manifest.warnings
    }
}

pub fn execute(cfg: &RunConfig, root: &Path, force: bool) -> Result<RunOutcome> {
    execute_with(cfg, root, force, &mut |_| Ok(()))
}

/// Runs the whole stream. Artifacts are written as the run goes, so a
/// failure leaves the tasks completed so far on disk with the manifest
/// marked failed.
pub fn execute_with(cfg: &RunConfig, root: &Path, force: bool, after_task: &mut AfterTask<'_>) -> Result<RunOutcome> {
    cfg.validate()?;
    let preset = cfg.stream()?;
    cfg.train_config().validate_for(&cfg.model)?;
    let mut dir = RunDir::create(root, cfg, force)?;
    dir.log(&format!(
        "stream {} ({} tasks), strategy {}, seed {}",
        preset.name,
        preset.tasks.len(),
        cfg.strategy,
        cfg.seed
    ));

    match drive(&mut dir, cfg, &preset, after_task) {
        Ok(state) => {
            checkpoint::save(&mut dir, &state, &preset)?;
            dir.log("checkpoint written");
            for r in &state.records {
                if r.plan.degenerate {
                    dir.warn(format!("task {}: both module scores were zero, budget split evenly", r.task_id));
                }
            }
            for t in state.freeze_violations() {
                dir.warn(format!("task {t}: frozen parameters changed during training"));
            }
            render_into(&mut dir)?;
            dir.finish(RunStatus::Complete, None)?;
            Ok(RunOutcome {
                root: root.to_path_buf(),
                state,
                preset,
                manifest: dir.manifest.clone(),
            })
        }
        Err((partial, msg)) => {
            dir.log(&format!("error: {msg}"));
            if let Some(state) = &partial {
                // the history may be what failed to write; the manifest still records the failure
                if checkpoint::save_history(&mut dir, state, &preset).is_ok() {
                    let _ = render_into(&mut dir);
                }
            }
            dir.finish(RunStatus::Failed, Some(msg.clone()))?;
            Err(CliError::Runtime(format!(
                "run failed: {msg} (partial artifacts in {})",
                root.display()
            )))
        }
    }
}

fn render_into(dir: &mut RunDir) -> Result<()> {
    let (inputs, warnings) = ReportInputs::read(&dir.root)?;
    let rendered = report::render(&inputs);
    for w in warnings.into_iter().chain(rendered.warnings) {
        dir.warn(w);
    }
    for (name, bytes) in &rendered.files {
        dir.write(name, bytes)?;
    }
    dir.log(&format!("report rendered ({} files)", rendered.files.len()));
    Ok(())
}

type Failure = (Option<StreamState>, String);

fn drive(dir: &mut RunDir, cfg: &RunConfig, preset: &StreamPreset, after_task: &mut AfterTask<'_>) -> std::result::Result<StreamState, Failure> {
    let started = Instant::now();
    let (mut state, trains) = prepare_stream(preset, cfg.model, cfg.strategy, cfg.train_config(), cfg.seed)
        .map_err(|e| (None, format!("preparing the stream: {e}")))?;
    let zero: Vec<String> = state.scores.zero_shot.iter().map(|a| format!("{a:.3}")).collect();
    dir.log(&format!(
        "backbone pretrained, tasks generated in {:.2}s; zero-shot accuracy [{}]",
        started.elapsed().as_secs_f64(),
        zero.join(", ")
    ));

    for (spec, train) in preset.tasks.iter().zip(trains) {
        let t0 = Instant::now();
        let line = match state.run_task(spec, &train) {
            Ok(r) => {
                let layers = |m: Module| r.plan.module(m).selected().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
                format!(
                    "task {} ({}): llm [{}] vision [{}], transfer {}, {} trainable, final loss {:.4}",
                    spec.task_id,
                    spec.name,
                    layers(Module::Llm),
                    layers(Module::Vision),
                    r.transfer.map_or_else(|| String::from("none"), |t| t.to_string()),
                    r.trainable_params,
                    r.train_loss.last().copied().unwrap_or(f64::NAN),
                )
            }
            Err(e) => return Err((Some(state), format!("task {}: {e}", spec.task_id))),
        };
        // the training split is dropped here, before the next task starts
        drop(train);
        let row = state.scores.rows.last().map(|r| r.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", "));
        dir.log(&format!("{line}; accuracy [{}] in {:.2}s", row.unwrap_or_default(), t0.elapsed().as_secs_f64()));
        if let Err(e) = checkpoint::save_history(dir, &state, preset) {
            return Err((Some(state), e.to_string()));
        }
        if let Err(msg) = after_task(&state) {
            return Err((Some(state), msg));
        }
    }
    Ok(state)
}
