//! Per-task autoencoder routers over pooled sequence features.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TaskId;
use crate::error::{Error, Result};
use crate::nn::{Optimizer, ParamId, ParamStore, Tape, Tensor};
use crate::seed::{self, Rng};

pub const DEFAULT_THRESHOLD_SCALE: f64 = 1.2;
pub const DEFAULT_TOP_K: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            hidden: 128,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 16,
        }
    }
}

/// `z -> relu(z We + be) Wd + bd`, trained on one task's features.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAutoencoder {
    pub task_id: TaskId,
    pub dim: usize,
    pub hidden: usize,
    pub params: ParamStore,
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub dec_w: ParamId,
    pub dec_b: ParamId,
    /// Full-data loss before training, then after each epoch.
    pub loss_history: Vec<f64>,
    threshold: Option<f64>,
}

impl TaskAutoencoder {
    pub fn new(task_id: TaskId, dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::InvalidSpec(format!("autoencoder dims must be positive, got {dim}x{hidden}")));
        }
        let mut params = ParamStore::new();
        let enc_w = params.insert(
            "enc.w",
            Tensor::matrix(dim, hidden, seed::normal_vec(rng, dim * hidden, libm::sqrt(2.0 / dim as f64)))?,
        );
        let enc_b = params.insert("enc.b", Tensor::zeros(1, hidden));
        let dec_w = params.insert(
            "dec.w",
            Tensor::matrix(hidden, dim, seed::normal_vec(rng, hidden * dim, libm::sqrt(1.0 / hidden as f64)))?,
        );
        let dec_b = params.insert("dec.b", Tensor::zeros(1, dim));
        Ok(TaskAutoencoder {
            task_id,
            dim,
            hidden,
            params,
            enc_w,
            enc_b,
            dec_w,
            dec_b,
            loss_history: Vec::new(),
            threshold: None,
        })
    }

    /// Rebuilds a trained router from stored parameters.
    pub fn from_parts(task_id: TaskId, params: ParamStore, threshold: Option<f64>) -> Result<Self> {
        let get = |name: &str| {
            params
                .find(name)
                .ok_or_else(|| Error::contract(format!("autoencoder parameter '{name}' missing")))
        };
        let (enc_w, enc_b, dec_w, dec_b) = (get("enc.w")?, get("enc.b")?, get("dec.w")?, get("dec.b")?);
        let (dim, hidden) = params.get(enc_w).dims2()?;
        if params.get(dec_w).dims2()? != (hidden, dim) {
            return Err(Error::contract("autoencoder encoder and decoder shapes disagree"));
        }
        Ok(TaskAutoencoder {
            task_id,
            dim,
            hidden,
            params,
            enc_w,
            enc_b,
            dec_w,
            dec_b,
            loss_history: Vec::new(),
            threshold,
        })
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn is_trained(&self) -> bool {
        self.threshold.is_some()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let (we, be) = (self.params.get(self.enc_w).data(), self.params.get(self.enc_b).data());
        let (wd, bd) = (self.params.get(self.dec_w).data(), self.params.get(self.dec_b).data());
        let mut h = be.to_vec();
        for (i, &zi) in z.iter().enumerate() {
            if zi != 0.0 {
                for (hj, w) in h.iter_mut().zip(&we[i * self.hidden..(i + 1) * self.hidden]) {
                    *hj += zi * w;
                }
            }
        }
        let mut out = bd.to_vec();
        for (j, &hj) in h.iter().enumerate() {
            if hj > 0.0 {
                for (o, w) in out.iter_mut().zip(&wd[j * self.dim..(j + 1) * self.dim]) {
                    *o += hj * w;
                }
            }
        }
        out
    }

    /// Mean squared reconstruction error over the coordinates of `z`.
    pub fn reconstruction_loss(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::Shape {
                op: "reconstruction_loss",
                lhs: alloc::vec![z.len()],
                rhs: alloc::vec![self.dim],
            });
        }
        Ok(mse(z, &self.reconstruct(z)))
    }

    pub fn losses(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        features.iter().map(|z| self.reconstruction_loss(z)).collect()
    }

    pub fn mean_loss(&self, features: &[Vec<f64>]) -> Result<f64> {
        if features.is_empty() {
            return Err(Error::contract("no features to score"));
        }
        Ok(self.losses(features)?.iter().sum::<f64>() / features.len() as f64)
    }

    /// Sets `tau = scale * max training loss` and returns it.
    pub fn calibrate_threshold(&mut self, features: &[Vec<f64>], scale: f64) -> Result<f64> {
        if self.loss_history.is_empty() {
            return Err(Error::contract("threshold requested before training"));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidSpec(format!("threshold scale must be positive, got {scale}")));
        }
        let max = self
            .losses(features)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::contract("no calibration features"));
        }
        let tau = scale * max;
        self.threshold = Some(tau);
        Ok(tau)
    }

    fn tape_loss(&self, tape: &mut Tape, rows: &[&Vec<f64>]) -> Result<crate::nn::Var> {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let z = tape.input_matrix(rows.len(), self.dim, data)?;
        let we = tape.param(&self.params, self.enc_w)?;
        let be = tape.param(&self.params, self.enc_b)?;
        let wd = tape.param(&self.params, self.dec_w)?;
        let bd = tape.param(&self.params, self.dec_b)?;
        let h = tape.matmul(z, we)?;
        let h = tape.add_bias(h, be)?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, wd)?;
        let out = tape.add_bias(out, bd)?;
        let diff = tape.sub(out, z)?;
        let sq = tape.mul(diff, diff)?;
        tape.mean(sq)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Fits a fresh autoencoder to `features` with Adam on the mean squared
/// reconstruction error. The threshold is left unset.
pub fn train_autoencoder(
    features: &[Vec<f64>],
    task_id: TaskId,
    cfg: AutoencoderConfig,
    rng: &mut Rng,
) -> Result<TaskAutoencoder> {
    if features.len() < 2 {
        return Err(Error::contract(format!(
            "autoencoder needs at least 2 feature vectors, got {}",
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::contract("feature vectors differ in length"));
    }
    let mut ae = TaskAutoencoder::new(task_id, dim, cfg.hidden, rng)?;
    ae.params.set_requires_grad_all(true);
    let ids: Vec<ParamId> = ae.params.ids().collect();
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut order: Vec<usize> = (0..features.len()).collect();
    ae.loss_history.push(ae.mean_loss(features)?);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<&Vec<f64>> = chunk.iter().map(|&i| &features[i]).collect();
            let mut tape = Tape::new();
            let loss = ae.tape_loss(&mut tape, &rows)?;
            Optimizer::zero_grad(&mut ae.params, &ids);
            tape.backward(loss, &mut ae.params)?;
            opt.step(&mut ae.params, &ids)?;
        }
        let l = ae.mean_loss(features)?;
        ae.loss_history.push(l);
    }
    Optimizer::zero_grad(&mut ae.params, &ids);
    ae.params.set_requires_grad_all(false);
    Ok(ae)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// `(task, reconstruction loss)` for every router, in router order.
    pub losses: Vec<(TaskId, f64)>,
    /// Relevant tasks ranked by ascending loss (ties by task id).
    pub ranking: Vec<TaskId>,
    pub active: Vec<TaskId>,
    pub fallback: bool,
}

impl RoutingDecision {
    pub fn top1(&self) -> Option<TaskId> {
        self.active.first().copied()
    }
}

/// Admits every task whose loss is within `multiplier * tau`, ranks the
/// admitted tasks and activates the first `k`. An empty relevant set means
/// the sample falls back to the backbone.
pub fn route(routers: &[TaskAutoencoder], z: &[f64], k: usize, multiplier: f64) -> Result<RoutingDecision> {
    if routers.is_empty() {
        return Err(Error::contract("routing needs at least one trained router"));
    }
    let mut losses = Vec::with_capacity(routers.len());
    let mut relevant = Vec::new();
    for r in routers {
        let tau = r
            .threshold()
            .ok_or_else(|| Error::contract(format!("router for task {} has no threshold", r.task_id)))?;
        let l = r.reconstruction_loss(z)?;
        losses.push((r.task_id, l));
        if l <= multiplier * tau {
            relevant.push((r.task_id, l));
        }
    }
    relevant.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let ranking: Vec<TaskId> = relevant.into_iter().map(|(t, _)| t).collect();
    let active = ranking.iter().take(k).copied().collect();
    Ok(RoutingDecision {
        fallback: ranking.is_empty(),
        losses,
        ranking,
        active,
    })
}

/// The previous task whose router reconstructs `features` best on average.
pub fn select_transfer_expert(previous: &[TaskAutoencoder], features: &[Vec<f64>]) -> Result<Option<TaskId>> {
    let mut best: Option<(TaskId, f64)> = None;
    for r in previous {
        let l = r.mean_loss(features)?;
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((r.task_id, l));
        }
    }
    Ok(best.map(|(t, _)| t))
}
