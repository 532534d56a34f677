//! Saving and restoring a [`StreamState`].
//!
//! Tensor values go to raw little-endian f64 files (`params.bin` for the model,
//! `routers.bin` for every autoencoder); `checkpoint.json` indexes them by
//! name, shape and element offset and lists the expert bank. The stream's
//! history (records, evaluations, scores) is kept as JSON under `state/`.
//! Test splits are not stored: they are regenerated from the config, and the
//! reload checks that the regenerated data hashes to the recorded value.

use std::fs;
use std::path::Path;

use dmole_core::data::{self, StreamPreset, TaskId, TaskSpec};
use dmole_core::metrics::ScoreMatrix;
use dmole_core::model::{ExpertBank, LoraExpert, ModelConfig, Module, Slot, ToyMllm};
use dmole_core::nn::{ParamStore, Tensor};
use dmole_core::router::TaskAutoencoder;
use dmole_core::trainer::{EvalTask, Evaluation, Strategy, StreamState, TaskRecord, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{CliError, Result};
use crate::rundir::{read_json, LoadedRun, RunDir};

pub const INDEX: &str = "checkpoint/checkpoint.json";
pub const PARAMS: &str = "checkpoint/params.bin";
pub const ROUTERS: &str = "checkpoint/routers.bin";
pub const TASKS: &str = "state/tasks.json";
pub const SCORES: &str = "state/scores.json";
pub const RECORDS: &str = "state/records.json";
pub const EVALUATIONS: &str = "state/evaluations.json";
pub const ROUTER_SUMMARY: &str = "state/routers.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// In f64 elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub file: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub task_id: TaskId,
    pub module: Module,
    pub layer: usize,
    pub slot: Slot,
    pub rank: usize,
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterEntry {
    pub task_id: TaskId,
    pub dim: usize,
    pub hidden: usize,
    pub threshold: Option<f64>,
    /// Tensor names within `routers.bin` are prefixed `t<task>.`.
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub strategy: Strategy,
    pub seed: u64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub trained: Vec<TaskId>,
    pub params: Blob,
    /// `(module, layer, task)` layers recorded with no expert.
    pub unallocated: Vec<(Module, usize, TaskId)>,
    pub experts: Vec<ExpertEntry>,
    pub routers_file: String,
    pub routers_sha256: String,
    pub routers: Vec<RouterEntry>,
    /// Checksum over every model parameter, as computed by the model.
    pub params_checksum: u64,
    /// sha256 over the regenerated test splits, in stream order.
    pub test_data_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TasksFile {
    pub stream: String,
    pub tasks: Vec<TaskSpec>,
    pub unseen: Option<TaskSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterSummary {
    pub task_id: TaskId,
    pub threshold: Option<f64>,
    pub loss_history: Vec<f64>,
}

fn pack(store: &ParamStore, prefix: &str, bytes: &mut Vec<u8>, offset: &mut usize) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|(_, name, t)| {
            let entry = TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset: *offset,
            };
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            *offset += t.numel();
            entry
        })
        .collect()
}

fn unpack(blob: &[f64], entries: &[TensorEntry], strip: &str, file: &str) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let data = blob
            .get(e.offset..e.offset + n)
            .ok_or_else(|| CliError::Corrupt(vec![format!("{file}: tensor '{}' runs past the end", e.name)]))?;
        let t = Tensor::new(e.shape.clone(), data.to_vec())?;
        store.insert(e.name.strip_prefix(strip).unwrap_or(&e.name), t);
    }
    Ok(store)
}

fn read_blob(root: &Path, rel: &str, sha: &str) -> Result<Vec<f64>> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    if sha256_hex(&bytes) != sha {
        return Err(CliError::Corrupt(vec![format!("{rel}: sha256 does not match {INDEX}")]));
    }
    if bytes.len() % 8 != 0 {
        return Err(CliError::Corrupt(vec![format!("{rel}: length is not a multiple of 8")]));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn test_data_hash(tasks: &[EvalTask], unseen: Option<&EvalTask>) -> String {
    let mut bytes = Vec::new();
    for t in tasks.iter().chain(unseen) {
        for v in t.test.vision.iter().chain(&t.test.text) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &t.test.labels {
            bytes.extend_from_slice(&(y as u64).to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

/// Writes the state JSON files only; safe to call after every task.
pub fn save_history(dir: &mut RunDir, state: &StreamState, preset: &StreamPreset) -> Result<()> {
    dir.write_json(
        TASKS,
        &TasksFile {
            stream: preset.name.clone(),
            tasks: preset.tasks.clone(),
            unseen: state.unseen.as_ref().map(|_| preset.unseen.clone()),
        },
    )?;
    dir.write_json(SCORES, &state.scores)?;
    dir.write_json(RECORDS, &state.records)?;
    dir.write_json(EVALUATIONS, &state.evaluations)?;
    let routers: Vec<RouterSummary> = state
        .routers
        .iter()
        .map(|r| RouterSummary {
            task_id: r.task_id,
            threshold: r.threshold(),
            loss_history: r.loss_history.clone(),
        })
        .collect();
    dir.write_json(ROUTER_SUMMARY, &routers)
}

/// Writes the history and the full checkpoint.
pub fn save(dir: &mut RunDir, state: &StreamState, preset: &StreamPreset) -> Result<()> {
    save_history(dir, state, preset)?;

    let mut bytes = Vec::new();
    let mut offset = 0;
    let tensors = pack(&state.model.params, "", &mut bytes, &mut offset);
    let params = Blob {
        file: PARAMS.to_string(),
        sha256: sha256_hex(&bytes),
        tensors,
    };
    dir.write(PARAMS, &bytes)?;

    let mut rbytes = Vec::new();
    let mut roffset = 0;
    let routers: Vec<RouterEntry> = state
        .routers
        .iter()
        .map(|r| RouterEntry {
            task_id: r.task_id,
            dim: r.dim,
            hidden: r.hidden,
            threshold: r.threshold(),
            tensors: pack(&r.params, &format!("t{}.", r.task_id), &mut rbytes, &mut roffset),
        })
        .collect();
    let routers_sha256 = sha256_hex(&rbytes);
    dir.write(ROUTERS, &rbytes)?;

    let name = |id| state.model.params.name(id).to_string();
    let experts = state
        .bank
        .experts()
        .map(|e| ExpertEntry {
            task_id: e.task_id,
            module: e.module,
            layer: e.layer,
            slot: e.slot,
            rank: e.rank,
            a: name(e.a),
            b: name(e.b),
        })
        .collect();
    let unallocated = state.bank.indicators().filter(|(_, on)| !on).map(|(k, _)| k).collect();
    let all: Vec<_> = state.model.params.ids().collect();
    let index = CheckpointIndex {
        strategy: state.strategy,
        seed: state.seed,
        model_config: state.model.config,
        train_config: state.config,
        trained: state.trained.clone(),
        params,
        unallocated,
        experts,
        routers_file: ROUTERS.to_string(),
        routers_sha256,
        routers,
        params_checksum: state.model.checksum(&all),
        test_data_sha256: test_data_hash(&state.eval_tasks, state.unseen.as_ref()),
    };
    dir.write_json(INDEX, &index)
}

/// Restores the state saved by [`save`]. Bit-exact: every parameter, router
/// threshold and recorded score is the stored value.
pub fn load(run: &LoadedRun) -> Result<(StreamState, StreamPreset)> {
    let root = &run.root;
    if !root.join(INDEX).exists() {
        return Err(CliError::Refused {
            path: root.clone(),
            reason: String::from("no checkpoint (the run did not finish)"),
        });
    }
    let index: CheckpointIndex = read_json(root, INDEX)?;
    let cfg = &run.config;
    if index.strategy != cfg.strategy || index.seed != cfg.seed || index.train_config != cfg.train_config() {
        return Err(CliError::Refused {
            path: root.clone(),
            reason: String::from("checkpoint was written under a different configuration"),
        });
    }

    let blob = read_blob(root, &index.params.file, &index.params.sha256)?;
    let store = unpack(&blob, &index.params.tensors, "", PARAMS)?;
    let mut model = ToyMllm::from_store(index.model_config, store)?;
    model.params.set_requires_grad_all(false);
    let all: Vec<_> = model.params.ids().collect();
    if model.checksum(&all) != index.params_checksum {
        return Err(CliError::Corrupt(vec![format!("{PARAMS}: parameter checksum mismatch")]));
    }

    let mut bank = ExpertBank::new();
    for e in &index.experts {
        let find = |n: &str| {
            model
                .params
                .find(n)
                .ok_or_else(|| CliError::Corrupt(vec![format!("{INDEX}: expert tensor '{n}' not in {PARAMS}")]))
        };
        bank.insert_expert(LoraExpert {
            task_id: e.task_id,
            module: e.module,
            layer: e.layer,
            slot: e.slot,
            rank: e.rank,
            a: find(&e.a)?,
            b: find(&e.b)?,
        });
    }
    for &(m, l, t) in &index.unallocated {
        bank.mark_unallocated(m, l, t);
    }

    let rblob = read_blob(root, &index.routers_file, &index.routers_sha256)?;
    let summaries: Vec<RouterSummary> = read_json(root, ROUTER_SUMMARY)?;
    let mut routers = Vec::with_capacity(index.routers.len());
    for r in &index.routers {
        let params = unpack(&rblob, &r.tensors, &format!("t{}.", r.task_id), ROUTERS)?;
        let mut ae = TaskAutoencoder::from_parts(r.task_id, params, r.threshold)?;
        if (ae.dim, ae.hidden) != (r.dim, r.hidden) {
            return Err(CliError::Corrupt(vec![format!("{INDEX}: router {} shape mismatch", r.task_id)]));
        }
        if let Some(s) = summaries.iter().find(|s| s.task_id == r.task_id) {
            ae.loss_history.clone_from(&s.loss_history);
        }
        routers.push(ae);
    }

    let preset = cfg.stream()?;
    let tasks: TasksFile = read_json(root, TASKS)?;
    if tasks.tasks != preset.tasks {
        return Err(CliError::Refused {
            path: root.clone(),
            reason: format!("{TASKS} does not match the stream the config generates"),
        });
    }
    let mut eval_tasks = Vec::with_capacity(preset.tasks.len());
    for spec in &preset.tasks {
        eval_tasks.push(EvalTask::new(&model, spec, data::generate(spec)?.test)?);
    }
    let unseen = match tasks.unseen {
        Some(_) => Some(EvalTask::new(&model, &preset.unseen, data::generate(&preset.unseen)?.test)?),
        None => None,
    };
    if test_data_hash(&eval_tasks, unseen.as_ref()) != index.test_data_sha256 {
        return Err(CliError::Refused {
            path: root.clone(),
            reason: String::from("regenerated test data differs from the data the run was evaluated on"),
        });
    }

    let scores: ScoreMatrix = read_json(root, SCORES)?;
    let records: Vec<TaskRecord> = read_json(root, RECORDS)?;
    let evaluations: Vec<Evaluation> = read_json(root, EVALUATIONS)?;
    let state = StreamState {
        strategy: index.strategy,
        config: index.train_config,
        seed: index.seed,
        model,
        bank,
        routers,
        eval_tasks,
        unseen,
        trained: index.trained,
        records,
        evaluations,
        scores,
    };
    Ok((state, preset))
}
