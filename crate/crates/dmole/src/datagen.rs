//! Writes a configured stream's datasets to disk for inspection.
//!
//! Every split becomes `<id>-<name>-<split>.bin`: one row per sample of
//! little-endian f64 values, the vision tokens, then the text tokens, then the
//! label. A CSV copy with the same rows and `data.json` describing both sit
//! alongside.

use std::path::Path;

use dmole_core::data::{self, Dataset, TaskId, TokenDims};
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};
use crate::error::Result;
use crate::rundir::write_file;

pub const DATA_MANIFEST: &str = "data.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub task_id: TaskId,
    pub name: String,
    /// "pretrain", "stream" or "unseen".
    pub role: String,
    pub split: String,
    pub rows: usize,
    pub bin: String,
    pub csv: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    pub dims: TokenDims,
    pub n_classes: usize,
    pub row_len: usize,
    pub layout: String,
    pub files: Vec<SplitFile>,
}

fn rows_bin(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    for i in 0..ds.len() {
        for v in ds.vision_of(i).iter().chain(ds.text_of(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(ds.labels[i] as f64).to_le_bytes());
    }
    out
}

fn rows_csv(ds: &Dataset) -> Vec<u8> {
    let d = ds.dims;
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (0..d.vision_len())
        .map(|j| format!("v{j}"))
        .chain((0..d.text_len()).map(|j| format!("t{j}")))
        .chain([String::from("label")])
        .collect();
    w.write_record(&header).expect("in-memory csv");
    for i in 0..ds.len() {
        let rec: Vec<String> = ds
            .vision_of(i)
            .iter()
            .chain(ds.text_of(i))
            .map(|v| format!("{v}"))
            .chain([ds.labels[i].to_string()])
            .collect();
        w.write_record(&rec).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

/// Generates the pretraining task, every stream task and the unseen task
/// and writes both splits of each into `out`.
pub fn generate_data(cfg: &RunConfig, out: &Path) -> Result<DataManifest> {
    cfg.validate()?;
    let preset = cfg.stream()?;
    let dims = cfg.model.token_dims();
    let specs = std::iter::once(("pretrain", &preset.generic))
        .chain(preset.tasks.iter().map(|s| ("stream", s)))
        .chain([("unseen", &preset.unseen)]);
    let mut files = Vec::new();
    for (role, spec) in specs {
        let ds = data::generate(spec)?;
        for (split, d) in [("train", &ds.train), ("test", &ds.test)] {
            let stem = format!("{:02}-{}-{split}", spec.task_id, spec.name);
            let bin = rows_bin(d);
            write_file(out, &format!("{stem}.bin"), &bin)?;
            write_file(out, &format!("{stem}.csv"), &rows_csv(d))?;
            files.push(SplitFile {
                task_id: spec.task_id,
                name: spec.name.clone(),
                role: role.to_string(),
                split: split.to_string(),
                rows: d.len(),
                bin: format!("{stem}.bin"),
                csv: format!("{stem}.csv"),
                sha256: sha256_hex(&bin),
            });
        }
    }
    let manifest = DataManifest {
        config_hash: cfg.hash(),
        dims,
        n_classes: cfg.model.n_classes,
        row_len: dims.vision_len() + dims.text_len() + 1,
        layout: String::from("per row, little-endian f64: vision tokens (row-major), text tokens (row-major), label"),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(out, DATA_MANIFEST, text.as_bytes())?;
    Ok(manifest)
}

/// Reads one split file back.
pub fn read_split(path: &Path, dims: TokenDims, n_classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| crate::error::CliError::io(path, e))?;
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let row = dims.vision_len() + dims.text_len() + 1;
    if bytes.len() % 8 != 0 || vals.len() % row != 0 {
        return Err(crate::error::CliError::Corrupt(vec![format!(
            "{}: length is not a whole number of {row}-value rows",
            path.display()
        )]));
    }
    let (mut vision, mut text, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for r in vals.chunks(row) {
        vision.extend_from_slice(&r[..dims.vision_len()]);
        text.extend_from_slice(&r[dims.vision_len()..row - 1]);
        labels.push(r[row - 1] as usize);
    }
    Ok(Dataset::new(dims, n_classes, vision, text, labels)?)
}
