//! CSV and SVG reports rendered from a run's saved state.
//!
//! Rendering is a pure function of the `state/*.json` files, so running it
//! twice produces byte-identical output. Missing inputs degrade to a partial
//! report with warnings; unreadable ones are an error naming the files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dmole_core::data::TaskId;
use dmole_core::metrics::{format_metric, ScoreMatrix};
use dmole_core::model::Module;
use dmole_core::trainer::{Evaluation, TaskRecord};
use serde::de::DeserializeOwned;

use crate::checkpoint::{RouterSummary, TasksFile, EVALUATIONS, RECORDS, ROUTER_SUMMARY, SCORES, TASKS};
use crate::error::{CliError, Result};
use crate::rundir::{write_file, LoadedRun, RunStatus};

/// The saved state a report is rendered from. Any part may be absent.
#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub tasks: Option<TasksFile>,
    pub scores: Option<ScoreMatrix>,
    pub records: Option<Vec<TaskRecord>>,
    pub evaluations: Option<Vec<Evaluation>>,
    pub routers: Option<Vec<RouterSummary>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rendered {
    /// `(path relative to the run root, contents)`, in a fixed order.
    pub files: Vec<(String, Vec<u8>)>,
    pub warnings: Vec<String>,
}

impl Rendered {
    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((format!("report/{name}"), bytes));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(n, _)| n == &format!("report/{name}"))
            .map(|(_, b)| b.as_slice())
    }
}

fn read_optional<T: DeserializeOwned>(root: &Path, rel: &str, corrupt: &mut Vec<String>, warnings: &mut Vec<String>) -> Option<T> {
    let path = root.join(rel);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            warnings.push(format!("{rel} is missing"));
            return None;
        }
        Err(e) => {
            corrupt.push(format!("{rel}: {e}"));
            return None;
        }
    };
    match serde_json::from_str(&text) {
        Ok(v) => Some(v),
        Err(e) => {
            corrupt.push(format!("{rel}: {e}"));
            None
        }
    }
}

impl ReportInputs {
    /// Reads whatever state the run directory holds.
    pub fn read(root: &Path) -> Result<(Self, Vec<String>)> {
        let mut corrupt = Vec::new();
        let mut warnings = Vec::new();
        let inputs = ReportInputs {
            tasks: read_optional(root, TASKS, &mut corrupt, &mut warnings),
            scores: read_optional(root, SCORES, &mut corrupt, &mut warnings),
            records: read_optional(root, RECORDS, &mut corrupt, &mut warnings),
            evaluations: read_optional(root, EVALUATIONS, &mut corrupt, &mut warnings),
            routers: read_optional(root, ROUTER_SUMMARY, &mut corrupt, &mut warnings),
        };
        if corrupt.is_empty() {
            Ok((inputs, warnings))
        } else {
            Err(CliError::Corrupt(corrupt))
        }
    }
}

/// Regenerates `report/` for an existing run and lists the files in its
/// manifest. Returns the warnings (missing inputs, a failed run).
pub fn write_report(run: &mut LoadedRun) -> Result<Vec<String>> {
    let (inputs, mut warnings) = ReportInputs::read(&run.root)?;
    let rendered = render(&inputs);
    warnings.extend(rendered.warnings.iter().cloned());
    match run.manifest.status {
        RunStatus::Complete => {}
        RunStatus::Failed => warnings.insert(
            0,
            format!("run failed: {}", run.manifest.error.as_deref().unwrap_or("unknown error")),
        ),
        RunStatus::Running => warnings.insert(0, String::from("run has not finished")),
    }
    for (name, bytes) in &rendered.files {
        write_file(&run.root, name, bytes)?;
    }
    run.record_files(rendered.files.into_iter().map(|(n, _)| n))?;
    Ok(warnings)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn task_name(tasks: Option<&TasksFile>, id: TaskId) -> String {
    tasks
        .and_then(|t| t.tasks.iter().chain(&t.unseen).find(|s| s.task_id == id))
        .map(|s| s.name.clone())
        .unwrap_or_default()
}

/// Renders every report the inputs allow.
pub fn render(inputs: &ReportInputs) -> Rendered {
    let mut out = Rendered::default();
    let tasks = inputs.tasks.as_ref();
    let ids: Vec<TaskId> = match (tasks, &inputs.records) {
        (Some(t), _) => t.tasks.iter().map(|s| s.task_id).collect(),
        (None, Some(r)) => r.iter().map(|r| r.task_id).collect(),
        (None, None) => Vec::new(),
    };
    let col_names: Vec<String> = ids.iter().map(|t| format!("t{t}")).collect();

    if let Some(scores) = &inputs.scores {
        render_scores(&mut out, scores, &ids, &col_names, tasks);
    } else {
        out.warnings.push(String::from("no score matrix; skipped scores and summary"));
    }
    match &inputs.records {
        Some(records) => render_records(&mut out, records),
        None => out
            .warnings
            .push(String::from("no task records; skipped sensitivity, allocation and dynamics")),
    }
    match &inputs.evaluations {
        Some(evals) if evals.len() > 1 => render_activation(&mut out, evals, &ids, &col_names, inputs.routers.as_deref()),
        _ => out
            .warnings
            .push(String::from("no post-training evaluation; skipped activation and routing")),
    }
    if let Some(routers) = &inputs.routers {
        let rows = routers.iter().flat_map(|r| {
            r.loss_history
                .iter()
                .enumerate()
                .map(move |(e, l)| vec![r.task_id.to_string(), e.to_string(), num(*l)])
        });
        out.add("router_losses.csv", csv_bytes(&["task_id", "epoch", "loss"], rows));
    }
    out
}

fn render_scores(out: &mut Rendered, scores: &ScoreMatrix, ids: &[TaskId], col_names: &[String], tasks: Option<&TasksFile>) {
    let fallback: Vec<TaskId>;
    let fallback_names: Vec<String>;
    let (ids, col_names) = if ids.len() == scores.n {
        (ids, col_names)
    } else {
        fallback = (1..=scores.n as TaskId).collect();
        fallback_names = fallback.iter().map(|t| format!("t{t}")).collect();
        (&fallback[..], &fallback_names[..])
    };
    let mut header = vec!["stage"];
    header.extend(col_names.iter().map(String::as_str));
    let mut rows = vec![std::iter::once(String::from("zero_shot"))
        .chain(scores.zero_shot.iter().copied().map(num))
        .collect::<Vec<_>>()];
    for (t, row) in scores.rows.iter().enumerate() {
        let stage = ids.get(t).map_or_else(|| format!("stage{t}"), |id| format!("after_t{id}"));
        rows.push(std::iter::once(stage).chain(row.iter().copied().map(num)).collect());
    }
    out.add("scores.csv", csv_bytes(&header, rows));

    let summary = match scores.summary() {
        Ok(s) => s,
        Err(_) => {
            out.warnings.push(format!(
                "score matrix has {} of {} rows; skipped summary",
                scores.rows.len(),
                scores.n
            ));
            return;
        }
    };
    let mut rows: Vec<Vec<String>> = summary
        .per_task
        .iter()
        .zip(ids)
        .map(|(m, &id)| vec![id.to_string(), task_name(tasks, id), num(m.avg), num(m.last), opt(m.bwt)])
        .collect();
    rows.push(vec![
        String::from("average"),
        String::new(),
        num(summary.mean_avg),
        num(summary.mean_last),
        opt(summary.mean_bwt),
    ]);
    out.add("summary.csv", csv_bytes(&["task_id", "task_name", "avg", "last", "bwt"], rows));

    let mut md = String::from("| task | AVG | Last | BWT |\n|---|---|---|---|\n");
    for (m, &id) in summary.per_task.iter().zip(ids) {
        let name = task_name(tasks, id);
        let _ = writeln!(md, "| {id} {name} | {:.4} | {:.4} | {} |", m.avg, m.last, format_metric(m.bwt));
    }
    let _ = writeln!(
        md,
        "| Average | {:.4} | {:.4} | {} |",
        summary.mean_avg,
        summary.mean_last,
        format_metric(summary.mean_bwt)
    );
    out.add("summary.md", md.into_bytes());
}

fn layer_columns(records: &[TaskRecord]) -> Vec<(Module, usize)> {
    let mut cols = Vec::new();
    if let Some(r) = records.first() {
        for m in Module::ALL {
            for l in 0..r.plan.module(m).indicators.len() {
                cols.push((m, l));
            }
        }
    }
    cols
}

fn render_records(out: &mut Rendered, records: &[TaskRecord]) {
    let rows = records.iter().flat_map(|r| {
        r.sensitivities.layers.iter().map(move |s| {
            vec![r.task_id.to_string(), s.module.as_str().to_string(), s.layer.to_string(), num(s.grad_norm)]
        })
    });
    out.add("sensitivity.csv", csv_bytes(&["task_id", "module", "layer", "grad_norm"], rows));

    let cols = layer_columns(records);
    let col_names: Vec<String> = cols.iter().map(|(m, l)| format!("{}.{l}", m.as_str())).collect();
    let row_names: Vec<String> = records.iter().map(|r| format!("t{}", r.task_id)).collect();
    let cells: Vec<Vec<Option<f64>>> = records
        .iter()
        .map(|r| cols.iter().map(|&(m, l)| r.sensitivities.norms(m).get(l).copied()).collect())
        .collect();
    matrix_outputs(out, "sensitivity_heatmap", "Layer sensitivity (gradient norm)", &row_names, &col_names, &cells);

    for m in Module::ALL {
        let n = records.first().map_or(0, |r| r.plan.module(m).indicators.len());
        let cols: Vec<String> = (0..n).map(|l| format!("{}.{l}", m.as_str())).collect();
        let cells: Vec<Vec<Option<f64>>> = records
            .iter()
            .map(|r| r.plan.module(m).indicators.iter().map(|&i| Some(f64::from(i))).collect())
            .collect();
        let title = format!("Expert allocation, {} tower", m.as_str());
        matrix_outputs(out, &format!("allocation_{}", m.as_str()), &title, &row_names, &cols, &cells);
    }
    let rows = records.iter().flat_map(|r| {
        Module::ALL.into_iter().flat_map(move |m| {
            let p = r.plan.module(m);
            (0..p.ranks.len()).map(move |l| {
                vec![
                    r.task_id.to_string(),
                    m.as_str().to_string(),
                    l.to_string(),
                    p.indicators[l].to_string(),
                    p.ranks[l].to_string(),
                ]
            })
        })
    });
    out.add("allocation.csv", csv_bytes(&["task_id", "module", "layer", "allocated", "rank"], rows));

    let rows = records.iter().map(|r| {
        vec![
            r.task_id.to_string(),
            r.plan.b_total.to_string(),
            r.plan.llm.budget.to_string(),
            r.plan.vision.budget.to_string(),
            num(r.plan.r_llm),
            num(r.plan.r_vision),
            num(r.sensitivities.llm.score),
            num(r.sensitivities.vision.score),
            r.transfer.map(|t| t.to_string()).unwrap_or_default(),
            r.trainable_params.to_string(),
            num(r.zero_init_gap),
            (r.frozen_checksum_before == r.frozen_checksum_after).to_string(),
        ]
    });
    out.add(
        "budgets.csv",
        csv_bytes(
            &[
                "task_id",
                "b_total",
                "b_llm",
                "b_vision",
                "r_llm",
                "r_vision",
                "score_llm",
                "score_vision",
                "transfer",
                "trainable_params",
                "zero_init_gap",
                "frozen_unchanged",
            ],
            rows,
        ),
    );

    let rows = records.iter().flat_map(|r| {
        r.relative_dynamics
            .iter()
            .map(move |(m, v)| vec![r.task_id.to_string(), m.as_str().to_string(), num(*v)])
    });
    out.add("relative_dynamics.csv", csv_bytes(&["task_id", "module", "relative_change"], rows));

    let rows = records.iter().flat_map(|r| {
        r.train_loss
            .iter()
            .enumerate()
            .map(move |(e, l)| vec![r.task_id.to_string(), e.to_string(), num(*l)])
    });
    out.add("train_loss.csv", csv_bytes(&["task_id", "epoch", "loss"], rows));

    let plans: Vec<_> = records.iter().map(|r| &r.plan).collect();
    out.add(
        "plans.json",
        serde_json::to_string_pretty(&plans).expect("plans serialize").into_bytes(),
    );
}

fn render_activation(
    out: &mut Rendered,
    evals: &[Evaluation],
    ids: &[TaskId],
    col_names: &[String],
    routers: Option<&[RouterSummary]>,
) {
    let last = evals.last().expect("non-empty");
    let evaluated: Vec<_> = last.tasks.iter().chain(&last.unseen).collect();
    let row_names: Vec<String> = evaluated
        .iter()
        .map(|e| if last.unseen.as_ref().is_some_and(|u| u.task_id == e.task_id) { String::from("unseen") } else { format!("t{}", e.task_id) })
        .collect();
    let cells: Vec<Vec<Option<f64>>> = evaluated.iter().map(|e| e.activation.clone()).collect();
    matrix_outputs(out, "activation", "Expert activation frequency (final)", &row_names, col_names, &cells);

    // every stage, with untrained experts left blank
    let mut rows = Vec::new();
    for (stage, ev) in evals.iter().enumerate().skip(1) {
        for e in ev.tasks.iter().chain(&ev.unseen) {
            for (k, a) in e.activation.iter().enumerate() {
                rows.push(vec![
                    stage.to_string(),
                    e.task_id.to_string(),
                    ids.get(k).map(ToString::to_string).unwrap_or_default(),
                    opt(*a),
                ]);
            }
        }
    }
    out.add(
        "activation_stages.csv",
        csv_bytes(&["stage", "evaluated_task", "expert_task", "frequency"], rows),
    );

    let thresholds: BTreeMap<TaskId, Option<f64>> =
        routers.unwrap_or_default().iter().map(|r| (r.task_id, r.threshold)).collect();
    let rows = evaluated.iter().zip(&row_names).map(|(e, name)| {
        vec![
            name.clone(),
            num(e.accuracy),
            num(e.fallback_rate),
            opt(e.top1_accuracy),
            opt(thresholds.get(&e.task_id).copied().flatten()),
        ]
    });
    out.add(
        "routing.csv",
        csv_bytes(&["task", "accuracy", "fallback_rate", "top1_accuracy", "threshold"], rows),
    );
}

/// `<name>.csv` as a labelled matrix (blank = absent) plus `<name>.svg`.
fn matrix_outputs(out: &mut Rendered, name: &str, title: &str, rows: &[String], cols: &[String], cells: &[Vec<Option<f64>>]) {
    let mut header = vec![""];
    header.extend(cols.iter().map(String::as_str));
    let body = rows
        .iter()
        .zip(cells)
        .map(|(r, c)| std::iter::once(r.clone()).chain(c.iter().map(|v| opt(*v))).collect());
    out.add(&format!("{name}.csv"), csv_bytes(&header, body));
    out.add(&format!("{name}.svg"), heatmap_svg(title, rows, cols, cells).into_bytes());
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A colored grid with labels; absent cells are grey.
pub fn heatmap_svg(title: &str, rows: &[String], cols: &[String], cells: &[Vec<Option<f64>>]) -> String {
    const CELL: usize = 32;
    const LEFT: usize = 90;
    const TOP: usize = 70;
    let values = cells.iter().flatten().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let width = LEFT + CELL * cols.len() + 20;
    let height = TOP + CELL * rows.len() + 30;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="8" y="18" font-size="13">{}</text>"#, escape(title));
    for (j, c) in cols.iter().enumerate() {
        let x = LEFT + j * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" transform="rotate(-45 {x} {})" text-anchor="start">{}</text>"#,
            TOP - 6,
            TOP - 6,
            escape(c)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let y = TOP + i * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6,
            y + CELL / 2 + 4,
            escape(r)
        );
        for (j, v) in cells[i].iter().enumerate() {
            let x = LEFT + j * CELL;
            let (fill, label) = match v {
                Some(v) if v.is_finite() => {
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
                    (blues(t), format!("{v:.4}"))
                }
                _ => (String::from("#d9d9d9"), String::from("absent")),
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="white"><title>{} / {}: {label}</title></rect>"#,
                escape(r),
                escape(&cols[j])
            );
        }
    }
    if lo.is_finite() {
        let _ = writeln!(
            s,
            r#"<text x="{LEFT}" y="{}">range {lo:.4} to {hi:.4}</text>"#,
            TOP + CELL * rows.len() + 18
        );
    }
    s.push_str("</svg>\n");
    s
}

/// White to dark blue.
fn blues(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}
