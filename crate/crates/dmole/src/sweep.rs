//! Re-evaluation of a finished run with every router threshold scaled.

use std::path::Path;

use dmole_core::data::TaskId;
use dmole_core::trainer::{Evaluation, StreamState};

use crate::checkpoint;
use crate::error::{CliError, Result};
use crate::rundir::{write_file, LoadedRun};

pub const DEFAULT_SCALES: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 10.0];
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub scale: f64,
    /// Accuracy of every stream task, in stream order.
    pub last: Vec<f64>,
    pub average_last: f64,
    /// Per router: evaluation samples (every test split and the unseen task)
    /// whose reconstruction loss is within the scaled threshold.
    pub admitted: Vec<(TaskId, usize)>,
    /// Fallback rate on the unseen task.
    pub unseen_rejection: Option<f64>,
    pub evaluation: Evaluation,
}

/// Evaluates `state` at each scale, in parallel. No training happens, and a
/// scale of 1 reproduces the evaluation recorded at the end of the run.
pub fn sweep(state: &StreamState, scales: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(CliError::Usage(format!("threshold scales must be positive, got {s}")));
    }
    let features: Vec<&Vec<f64>> = state
        .eval_tasks
        .iter()
        .chain(&state.unseen)
        .flat_map(|t| &t.features)
        .collect();
    let mut losses = Vec::with_capacity(state.routers.len());
    for r in &state.routers {
        let l: Vec<f64> = features
            .iter()
            .map(|z| r.reconstruction_loss(z))
            .collect::<dmole_core::Result<_>>()?;
        losses.push((r.task_id, r.threshold(), l));
    }

    let evaluations: Vec<dmole_core::Result<Evaluation>> = std::thread::scope(|s| {
        let handles: Vec<_> = scales.iter().map(|&m| s.spawn(move || state.evaluate(m))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });

    scales
        .iter()
        .zip(evaluations)
        .map(|(&scale, ev)| {
            let evaluation = ev?;
            let last = evaluation.accuracies();
            let average_last = last.iter().sum::<f64>() / last.len() as f64;
            let admitted = losses
                .iter()
                .map(|(t, tau, l)| {
                    let n = tau.map_or(0, |tau| l.iter().filter(|&&x| x <= scale * tau).count());
                    (*t, n)
                })
                .collect();
            Ok(SweepRow {
                scale,
                last,
                average_last,
                admitted,
                unseen_rejection: evaluation.unseen.as_ref().map(|u| u.fallback_rate),
                evaluation,
            })
        })
        .collect()
}

pub fn sweep_csv(state: &StreamState, rows: &[SweepRow]) -> Vec<u8> {
    let mut header = vec![String::from("scale")];
    header.extend(state.eval_tasks.iter().map(|t| format!("last_t{}", t.task_id)));
    header.push(String::from("average_last"));
    header.extend(state.routers.iter().map(|r| format!("admitted_t{}", r.task_id)));
    header.push(String::from("unseen_rejection"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory csv");
    for r in rows {
        let mut rec = vec![format!("{}", r.scale)];
        rec.extend(r.last.iter().map(|v| format!("{v}")));
        rec.push(format!("{}", r.average_last));
        rec.extend(r.admitted.iter().map(|(_, n)| n.to_string()));
        rec.push(r.unseen_rejection.map(|v| format!("{v}")).unwrap_or_default());
        w.write_record(&rec).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

/// Loads the final checkpoint of the run at `root`, sweeps and writes
/// `sweep.csv` into the run directory.
pub fn run_sweep(root: &Path, scales: &[f64]) -> Result<(StreamState, Vec<SweepRow>)> {
    let mut run = LoadedRun::open(root)?;
    let (state, _) = checkpoint::load(&run)?;
    if !state.is_done() {
        return Err(CliError::Refused {
            path: root.to_path_buf(),
            reason: format!("checkpoint has {} of {} tasks trained", state.trained.len(), state.n_tasks()),
        });
    }
    let rows = sweep(&state, scales)?;
    write_file(root, SWEEP_FILE, &sweep_csv(&state, &rows))?;
    run.record_files([SWEEP_FILE.to_string()])?;
    Ok((state, rows))
}
