use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanPool { x: Var, group: usize },
    Mean(Var),
    Sum(Var),
    PrependRows { prefix: Var, tokens: Var, group: usize },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Define-by-run recording of 2-D tensor operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            tracked: tracked && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("tape node shape is consistent")
    }

    /// Records a constant (never differentiated).
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Input, false))
    }

    pub fn input_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape {
                op: "input",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(rows, cols, data, Op::Input, false))
    }

    /// Binds a stored parameter; gradients flow back to it when it requires them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Param(id), t.requires_grad()))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        Error::Shape {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.node(a).value;
            let bv = &self.node(b).value;
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(m, n, out, Op::MatMul(a, b), tracked))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(op, a, b));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        Ok(av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let (r, c) = self.dims(a);
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(r, c, out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let (r, c) = self.dims(a);
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(r, c, out, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let (r, c) = self.dims(a);
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(r, c, out, Op::Mul(a, b), tracked))
    }

    /// `x` (m x n) plus a 1 x n row broadcast over every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(bias) != (1, n) {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let xv = &self.node(x).value;
        let bv = &self.node(bias).value;
        let out: Vec<f64> = xv
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let tracked = self.node(x).tracked || self.node(bias).tracked;
        Ok(self.push(m, n, out, Op::AddBias(x, bias), tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = self.node(x).value.iter().map(|v| v * factor).collect();
        let tracked = self.node(x).tracked;
        Ok(self.push(r, c, out, Op::Scale(x, factor), tracked))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = self.node(x).value.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let tracked = self.node(x).tracked;
        Ok(self.push(r, c, out, Op::Relu(x), tracked))
    }

    fn check_group(&self, op: &'static str, x: Var, group: usize) -> Result<(usize, usize)> {
        let (m, n) = self.dims(x);
        if group == 0 || m % group != 0 {
            return Err(Error::Shape {
                op,
                lhs: vec![m, n],
                rhs: vec![group],
            });
        }
        Ok((m, n))
    }

    /// Column-wise max over consecutive groups of `group` rows. The subgradient
    /// goes to the first row attaining the maximum.
    pub fn max_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.check_group("max_pool", x, group)?;
        let groups = m / group;
        let xv = &self.node(x).value;
        let mut out = vec![0.0; groups * n];
        let mut argmax = vec![0usize; groups * n];
        for g in 0..groups {
            for j in 0..n {
                let mut best = xv[g * group * n + j];
                let mut best_row = g * group;
                for r in 1..group {
                    let row = g * group + r;
                    let v = xv[row * n + j];
                    if v > best {
                        best = v;
                        best_row = row;
                    }
                }
                out[g * n + j] = best;
                argmax[g * n + j] = best_row;
            }
        }
        let tracked = self.node(x).tracked;
        Ok(self.push(groups, n, out, Op::MaxPool { x, argmax }, tracked))
    }

    /// Column-wise mean over consecutive groups of `group` rows.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.check_group("mean_pool", x, group)?;
        let groups = m / group;
        let xv = &self.node(x).value;
        let mut out = vec![0.0; groups * n];
        for (row, chunk) in xv.chunks(n).enumerate() {
            let o = &mut out[(row / group) * n..(row / group + 1) * n];
            for (a, b) in o.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let tracked = self.node(x).tracked;
        Ok(self.push(groups, n, out, Op::MeanPool { x, group }, tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x).value;
        let v = xv.iter().sum::<f64>() / xv.len() as f64;
        let tracked = self.node(x).tracked;
        Ok(self.push(1, 1, vec![v], Op::Mean(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.node(x).value.iter().sum::<f64>();
        let tracked = self.node(x).tracked;
        Ok(self.push(1, 1, vec![v], Op::Sum(x), tracked))
    }

    /// Interleaves one prefix row before every group of `group` token rows:
    /// `prefix` is B x d, `tokens` is (B * group) x d, result is (B * (group + 1)) x d.
    pub fn prepend_rows(&mut self, prefix: Var, tokens: Var, group: usize) -> Result<Var> {
        let (b, d) = self.dims(prefix);
        let (m, d2) = self.dims(tokens);
        if d != d2 || group == 0 || m != b * group {
            return Err(self.shape_err("prepend_rows", prefix, tokens));
        }
        let pv = &self.node(prefix).value;
        let tv = &self.node(tokens).value;
        let mut out = Vec::with_capacity((m + b) * d);
        for s in 0..b {
            out.extend_from_slice(&pv[s * d..(s + 1) * d]);
            out.extend_from_slice(&tv[s * group * d..(s + 1) * group * d]);
        }
        let tracked = self.node(prefix).tracked || self.node(tokens).tracked;
        Ok(self.push(m + b, d, out, Op::PrependRows { prefix, tokens, group }, tracked))
    }

    /// Mean over rows of the softmax cross-entropy between `logits` and class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.dims(logits);
        if labels.len() != m {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: vec![m, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let lv = &self.node(logits).value;
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = libm::exp(v - mx);
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss += -(row[labels[i]] - mx - libm::log(z));
        }
        loss /= m as f64;
        let tracked = self.node(logits).tracked;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every bound
    /// parameter of `store` that requires a gradient. Bound parameters with no
    /// path to `loss` get a zero gradient buffer.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::contract("backward called on a no-grad tape"));
        }
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::contract(format!("backward requires a scalar loss, got {r}x{c}")));
        }
        for node in &self.nodes[..=loss.0] {
            if let Op::Param(id) = node.op {
                let t = store.get_mut(id);
                if t.requires_grad() {
                    t.ensure_grad();
                }
            }
        }
        if !self.node(loss).tracked {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    store.get_mut(*id).accumulate_grad(&g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = node.cols;
                    if self.node(*a).tracked {
                        let bv = self.value(*b);
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.node(*b).tracked {
                        let av = self.value(*a);
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.pass(&mut grads, *a, || g.clone());
                    self.pass(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.pass(&mut grads, *a, || g.clone());
                    self.pass(&mut grads, *b, || g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    self.pass(&mut grads, *a, || g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    self.pass(&mut grads, *b, || g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::AddBias(x, bias) => {
                    let n = node.cols;
                    self.pass(&mut grads, *x, || g.clone());
                    self.pass(&mut grads, *bias, || {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        db
                    });
                }
                Op::Scale(x, f) => {
                    self.pass(&mut grads, *x, || g.iter().map(|v| v * f).collect());
                }
                Op::Relu(x) => {
                    let out = &node.value;
                    self.pass(&mut grads, *x, || {
                        g.iter().zip(out).map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 }).collect()
                    });
                }
                Op::MaxPool { x, argmax } => {
                    let (m, n) = self.dims(*x);
                    self.pass(&mut grads, *x, || {
                        let mut dx = vec![0.0; m * n];
                        for (slot, (&row, gv)) in argmax.iter().zip(&g).enumerate() {
                            dx[row * n + slot % n] += gv;
                        }
                        dx
                    });
                }
                Op::MeanPool { x, group } => {
                    let (m, n) = self.dims(*x);
                    let inv = 1.0 / *group as f64;
                    self.pass(&mut grads, *x, || {
                        let mut dx = vec![0.0; m * n];
                        for (row, chunk) in dx.chunks_mut(n).enumerate() {
                            let src = &g[(row / group) * n..(row / group + 1) * n];
                            for (d, s) in chunk.iter_mut().zip(src) {
                                *d = s * inv;
                            }
                        }
                        dx
                    });
                }
                Op::Mean(x) => {
                    let len = self.value(*x).len();
                    let v = g[0] / len as f64;
                    self.pass(&mut grads, *x, || vec![v; len]);
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    self.pass(&mut grads, *x, || vec![g[0]; len]);
                }
                Op::PrependRows { prefix, tokens, group } => {
                    let (b, d) = self.dims(*prefix);
                    let stride = (group + 1) * d;
                    self.pass(&mut grads, *prefix, || {
                        (0..b).flat_map(|s| g[s * stride..s * stride + d].iter().copied()).collect()
                    });
                    self.pass(&mut grads, *tokens, || {
                        (0..b)
                            .flat_map(|s| g[s * stride + d..(s + 1) * stride].iter().copied())
                            .collect()
                    });
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let (m, c) = self.dims(*logits);
                    let scale = g[0] / m as f64;
                    self.pass(&mut grads, *logits, || {
                        let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                        for (i, &y) in labels.iter().enumerate() {
                            d[i * c + y] -= scale;
                        }
                        d
                    });
                }
            }
        }
        Ok(())
    }

    fn pass(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.node(target).tracked {
            accumulate(grads, target, f());
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
