//! Reproducible synthetic multimodal classification tasks.
//!
//! Each sample is a sequence of vision tokens, a sequence of text tokens and a
//! class label. Every token of a class-`c` sample is
//! `offset + signal * mean[c] + noise`, where the vision stream carries
//! `alpha * separation` of the class signal and the text stream the remaining
//! `(1 - alpha) * separation`. The per-task offsets and class means are drawn
//! from the task's geometry seed; the draws of individual samples come from its
//! sample seed, so two specs sharing a geometry seed are identically
//! distributed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub type TaskId = u32;

/// Minimum accuracy the nearest-centroid probe must reach on concatenated tokens.
pub const PROBE_MIN_ACCURACY: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDims {
    pub n_vision_tokens: usize,
    pub d_v: usize,
    pub n_text_tokens: usize,
    pub d_t: usize,
}

impl TokenDims {
    pub fn vision_len(&self) -> usize {
        self.n_vision_tokens * self.d_v
    }

    pub fn text_len(&self) -> usize {
        self.n_text_tokens * self.d_t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub name: String,
    /// Seeds class means and the task offset.
    pub geometry_seed: u64,
    /// Seeds the sample draws.
    pub sample_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    /// Fraction of the class signal carried by the vision stream.
    pub modality_mix: f64,
    pub separation: f64,
    pub noise: f64,
    /// Per-coordinate scale of the task's constant token offset (the
    /// distribution-shift signature that keeps task features apart).
    pub shift: f64,
    pub dims: TokenDims,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(0.0..=1.0).contains(&self.modality_mix) {
            return bad(format!("modality_mix {} outside [0, 1]", self.modality_mix));
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.n_train < self.n_classes || self.n_test < self.n_classes {
            return bad(format!("splits must hold at least one sample per class ({})", self.n_classes));
        }
        if !(self.separation > 0.0) || !(self.noise > 0.0) || !(self.shift >= 0.0) {
            return bad(String::from("separation and noise must be positive, shift non-negative"));
        }
        let d = self.dims;
        if d.n_vision_tokens == 0 || d.n_text_tokens == 0 || d.d_v == 0 || d.d_t == 0 {
            return bad(String::from("token dimensions must be positive"));
        }
        Ok(())
    }
}

/// Token tensors and labels for a split, stored flat: sample `i` owns
/// `vision[i * vision_len..]` and `text[i * text_len..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: TokenDims,
    pub n_classes: usize,
    pub vision: Vec<f64>,
    pub text: Vec<f64>,
    pub labels: Vec<usize>,
}

/// A minibatch laid out for the model: vision is `(size * n_vision_tokens) x d_v`,
/// text is `(size * n_text_tokens) x d_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dims: TokenDims,
    pub vision: Vec<f64>,
    pub text: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Read access to a task's training split. The trainer only touches training
/// data through this trait, which lets tests audit when it is read.
pub trait TrainData {
    fn len(&self) -> usize;
    fn batch(&self, indices: &[usize]) -> Batch;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn new(dims: TokenDims, n_classes: usize, vision: Vec<f64>, text: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        if vision.len() != n * dims.vision_len() || text.len() != n * dims.text_len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: vec![n, dims.vision_len(), dims.text_len()],
                rhs: vec![vision.len(), text.len()],
            });
        }
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(Error::contract("label out of range"));
        }
        Ok(Dataset {
            dims,
            n_classes,
            vision,
            text,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn vision_of(&self, i: usize) -> &[f64] {
        let l = self.dims.vision_len();
        &self.vision[i * l..(i + 1) * l]
    }

    pub fn text_of(&self, i: usize) -> &[f64] {
        let l = self.dims.text_len();
        &self.text[i * l..(i + 1) * l]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut vision = Vec::with_capacity(indices.len() * self.dims.vision_len());
        let mut text = Vec::with_capacity(indices.len() * self.dims.text_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            vision.extend_from_slice(self.vision_of(i));
            text.extend_from_slice(self.text_of(i));
            labels.push(self.labels[i]);
        }
        Batch {
            dims: self.dims,
            vision,
            text,
            labels,
        }
    }

    pub fn all(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            dims: self.dims,
            n_classes: self.n_classes,
            vision: b.vision,
            text: b.text,
            labels: b.labels,
        }
    }
}

impl TrainData for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn batch(&self, indices: &[usize]) -> Batch {
        Dataset::batch(self, indices)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub test: Dataset,
}

struct Geometry {
    vision_offset: Vec<f64>,
    text_offset: Vec<f64>,
    vision_means: Vec<Vec<f64>>,
    text_means: Vec<Vec<f64>>,
}

fn unit_vectors(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v = seed::normal_vec(rng, dim, 1.0);
            let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn geometry(spec: &TaskSpec) -> Geometry {
    let mut rng = seed::derived_rng(spec.geometry_seed, "geometry", 0);
    let d = spec.dims;
    let vision_offset = seed::normal_vec(&mut rng, d.d_v, spec.shift);
    let text_offset = seed::normal_vec(&mut rng, d.d_t, spec.shift);
    let vision_means = unit_vectors(&mut rng, spec.n_classes, d.d_v);
    let text_means = unit_vectors(&mut rng, spec.n_classes, d.d_t);
    Geometry {
        vision_offset,
        text_offset,
        vision_means,
        text_means,
    }
}

fn draw_split(spec: &TaskSpec, geo: &Geometry, n: usize, stream: &str) -> Dataset {
    let mut rng = seed::derived_rng(spec.sample_seed, stream, 0);
    let d = spec.dims;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let v_sig = spec.modality_mix * spec.separation;
    let t_sig = (1.0 - spec.modality_mix) * spec.separation;
    let mut vision = Vec::with_capacity(n * d.vision_len());
    let mut text = Vec::with_capacity(n * d.text_len());
    for &y in &labels {
        for _ in 0..d.n_vision_tokens {
            for j in 0..d.d_v {
                vision.push(geo.vision_offset[j] + v_sig * geo.vision_means[y][j] + spec.noise * seed::normal(&mut rng));
            }
        }
        for _ in 0..d.n_text_tokens {
            for j in 0..d.d_t {
                text.push(geo.text_offset[j] + t_sig * geo.text_means[y][j] + spec.noise * seed::normal(&mut rng));
            }
        }
    }
    Dataset {
        dims: d,
        n_classes: spec.n_classes,
        vision,
        text,
        labels,
    }
}

/// Generates both splits and checks with a nearest-centroid probe that the
/// task is learnable from the concatenated raw tokens.
pub fn generate(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let geo = geometry(spec);
    let train = draw_split(spec, &geo, spec.n_train, "train");
    let test = draw_split(spec, &geo, spec.n_test, "test");
    let acc = probe_accuracy(&train, &test, ProbeView::Both);
    if acc < PROBE_MIN_ACCURACY {
        return Err(Error::Infeasible(format!(
            "task {} ({}): linear probe accuracy {acc:.3} < {PROBE_MIN_ACCURACY}",
            spec.task_id, spec.name
        )));
    }
    Ok(TaskDataset {
        spec: spec.clone(),
        train,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeView {
    Both,
    VisionOnly,
    TextOnly,
}

fn probe_features(ds: &Dataset, i: usize, view: ProbeView) -> Vec<f64> {
    match view {
        ProbeView::Both => {
            let mut f = ds.vision_of(i).to_vec();
            f.extend_from_slice(ds.text_of(i));
            f
        }
        ProbeView::VisionOnly => ds.vision_of(i).to_vec(),
        ProbeView::TextOnly => ds.text_of(i).to_vec(),
    }
}

/// Test accuracy of a nearest-class-centroid classifier fit on `train`
/// (a linear classifier under isotropic noise).
pub fn probe_accuracy(train: &Dataset, test: &Dataset, view: ProbeView) -> f64 {
    let dim = probe_features(train, 0, view).len();
    let c = train.n_classes;
    let mut centroids = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for i in 0..train.len() {
        let y = train.labels[i];
        counts[y] += 1;
        for (a, b) in centroids[y].iter_mut().zip(probe_features(train, i, view)) {
            *a += b;
        }
    }
    for (cent, &n) in centroids.iter_mut().zip(&counts) {
        let n = n.max(1) as f64;
        cent.iter_mut().for_each(|v| *v /= n);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let f = probe_features(test, i, view);
            let pred = centroids
                .iter()
                .enumerate()
                .map(|(k, cent)| (k, cent.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0;
            pred == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Uniform sample without replacement of
/// `max(ceil(fraction * n), min(min_count, n))` indices, returned ascending.
pub fn subset(n: usize, fraction: f64, min_count: usize, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let size = subset_size(n, fraction, min_count);
    let mut rng = seed::rng(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn subset_size(n: usize, fraction: f64, min_count: usize) -> usize {
    let by_fraction = libm::ceil(fraction * n as f64) as usize;
    by_fraction.max(min_count.min(n)).min(n)
}

/// Generation knobs shared by the presets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub shift: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_train: 800,
            n_test: 200,
            n_classes: 4,
            separation: 3.0,
            noise: 1.0,
            shift: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamPreset {
    pub name: String,
    /// Backbone pretraining task, never part of the stream.
    pub generic: TaskSpec,
    pub tasks: Vec<TaskSpec>,
    /// Never trained; exercises the router fallback.
    pub unseen: TaskSpec,
}

pub const HETEROGENEOUS_5_MIX: [f64; 5] = [0.9, 0.1, 0.7, 0.3, 0.5];

impl StreamPreset {
    pub fn by_name(name: &str, root_seed: u64, dims: TokenDims, gen: GeneratorConfig) -> Result<Self> {
        match name {
            "heterogeneous-5" => Ok(Self::heterogeneous5(root_seed, dims, gen)),
            "twin-pair" => Ok(Self::twin_pair(root_seed, dims, gen)),
            other => Err(Error::InvalidSpec(format!("unknown preset '{other}'"))),
        }
    }

    fn spec(root: u64, dims: TokenDims, gen: GeneratorConfig, id: TaskId, name: &str, geo_key: u64, mix: f64) -> TaskSpec {
        TaskSpec {
            task_id: id,
            name: String::from(name),
            geometry_seed: seed::derive(root, "task-geometry", geo_key),
            sample_seed: seed::derive(root, "task-samples", u64::from(id)),
            n_train: gen.n_train,
            n_test: gen.n_test,
            n_classes: gen.n_classes,
            modality_mix: mix,
            separation: gen.separation,
            noise: gen.noise,
            shift: gen.shift,
            dims,
        }
    }

    fn generic(root: u64, dims: TokenDims, gen: GeneratorConfig) -> TaskSpec {
        let mut g = Self::spec(root, dims, gen, 0, "generic", 1000, 0.5);
        g.sample_seed = seed::derive(root, "task-samples", 1000);
        g.shift = 0.0;
        g.n_train = gen.n_train * 2;
        g
    }

    fn unseen(root: u64, dims: TokenDims, gen: GeneratorConfig) -> TaskSpec {
        let mut u = Self::spec(root, dims, gen, 99, "unseen", 999, 0.5);
        u.sample_seed = seed::derive(root, "task-samples", 999);
        u
    }

    /// Five tasks alternating modality emphasis with distinct geometries.
    pub fn heterogeneous5(root: u64, dims: TokenDims, gen: GeneratorConfig) -> Self {
        let tasks = HETEROGENEOUS_5_MIX
            .iter()
            .enumerate()
            .map(|(i, &mix)| {
                let id = i as TaskId + 1;
                Self::spec(root, dims, gen, id, &format!("hetero-{id}-a{mix:.1}"), u64::from(id), mix)
            })
            .collect();
        StreamPreset {
            name: String::from("heterogeneous-5"),
            generic: Self::generic(root, dims, gen),
            tasks,
            unseen: Self::unseen(root, dims, gen),
        }
    }

    /// Two identically distributed tasks: shared geometry, distinct sample seeds.
    pub fn twin_pair(root: u64, dims: TokenDims, gen: GeneratorConfig) -> Self {
        let tasks = (1..=2)
            .map(|id| Self::spec(root, dims, gen, id, &format!("twin-{id}"), 1, 0.5))
            .collect();
        StreamPreset {
            name: String::from("twin-pair"),
            generic: Self::generic(root, dims, gen),
            tasks,
            unseen: Self::unseen(root, dims, gen),
        }
    }

    /// A stream from explicit `(name, modality_mix, geometry_key)` entries.
    /// Task ids run from 1; tasks sharing a geometry key share class means.
    pub fn custom(root: u64, dims: TokenDims, gen: GeneratorConfig, entries: &[(String, f64, u64)]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidSpec(String::from("custom stream has no tasks")));
        }
        let tasks: Vec<TaskSpec> = entries
            .iter()
            .enumerate()
            .map(|(i, (name, mix, key))| Self::spec(root, dims, gen, i as TaskId + 1, name, *key, *mix))
            .collect();
        for t in &tasks {
            t.validate()?;
        }
        Ok(StreamPreset {
            name: String::from("custom"),
            generic: Self::generic(root, dims, gen),
            tasks,
            unseen: Self::unseen(root, dims, gen),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> TokenDims {
        TokenDims {
            n_vision_tokens: 4,
            d_v: 16,
            n_text_tokens: 4,
            d_t: 32,
        }
    }

    fn spec(mix: f64) -> TaskSpec {
        StreamPreset::spec(5, dims(), GeneratorConfig::default(), 1, "t", 1, mix)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(0.7)).unwrap();
        let b = generate(&spec(0.7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_are_class_balanced() {
        let ds = generate(&spec(0.5)).unwrap();
        for c in 0..4 {
            assert_eq!(ds.train.labels.iter().filter(|&&y| y == c).count(), 200);
        }
    }

    #[test]
    fn pure_vision_task_hides_labels_from_text() {
        let ds = generate(&spec(1.0)).unwrap();
        let text = probe_accuracy(&ds.train, &ds.test, ProbeView::TextOnly);
        assert!(text <= 0.25 + 0.1, "text probe {text}");
        assert!(probe_accuracy(&ds.train, &ds.test, ProbeView::VisionOnly) >= 0.95);
    }

    #[test]
    fn pure_text_task_hides_labels_from_vision() {
        let ds = generate(&spec(0.0)).unwrap();
        let vision = probe_accuracy(&ds.train, &ds.test, ProbeView::VisionOnly);
        assert!(vision <= 0.25 + 0.1, "vision probe {vision}");
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let mut s = spec(0.5);
        s.separation = 0.05;
        assert!(matches!(generate(&s), Err(Error::Infeasible(_))));
        s.modality_mix = 1.5;
        assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn subset_sizes() {
        assert_eq!(subset(500, 1.0, 64, 1).unwrap(), (0..500).collect::<Vec<_>>());
        assert_eq!(subset(10_000, 0.01, 64, 1).unwrap().len(), 100);
        assert_eq!(subset(30, 0.01, 64, 1).unwrap(), (0..30).collect::<Vec<_>>());
        assert_eq!(subset(1000, 0.01, 64, 1).unwrap().len(), 64);
        assert!(subset(10, 0.0, 1, 1).is_err());
    }

    #[test]
    fn subset_is_without_replacement() {
        let s = subset(200, 0.5, 0, 9).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn twin_tasks_share_geometry() {
        let p = StreamPreset::twin_pair(3, dims(), GeneratorConfig::default());
        assert_eq!(p.tasks[0].geometry_seed, p.tasks[1].geometry_seed);
        assert_ne!(p.tasks[0].sample_seed, p.tasks[1].sample_seed);
        let h = StreamPreset::heterogeneous5(3, dims(), GeneratorConfig::default());
        let mix: Vec<f64> = h.tasks.iter().map(|t| t.modality_mix).collect();
        assert_eq!(mix, HETEROGENEOUS_5_MIX.to_vec());
        let mut seeds: Vec<u64> = h.tasks.iter().map(|t| t.sample_seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 5);
    }
}
