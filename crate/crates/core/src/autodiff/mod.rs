//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every op evaluates eagerly and appends a node holding its output plus
//! whatever its backward rule needs. Node ids are assigned in creation order,
//! so the tape is topologically sorted by construction and `backward` is a
//! single reverse sweep.
//!
//! The ops are deliberately coarse (fused RMSNorm, rotary, SSD scan,
//! attention, cross-entropy) so that a training step is a few hundred nodes,
//! not millions of scalar ones.

mod check;

use std::sync::Arc;

pub use check::{
    directional_check, grad_check, grad_check_sampled, relative_error, DirectionalReport, GradientReport, ParamReport,
    MAX_COORDS,
};

use crate::attention::{self, AttnLayout, Normalize};
use crate::error::{Error, Result};
use crate::rope::{self, FrequencyTable};
use crate::ssd::{self, SsdLayout};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Rotary settings carried by a rotation node.
#[derive(Clone, Debug)]
pub struct RopeSpec {
    pub table: Arc<FrequencyTable>,
    pub head_dim: usize,
    /// Rows per sequence; row `r` sits at position `start + r % seq_len`.
    pub seq_len: usize,
    pub start: usize,
    /// Long-position scaling base; rotated vectors are multiplied by
    /// `max(1, log_base(m + 1))`.
    pub log_scale_base: Option<u64>,
}

impl RopeSpec {
    fn position(&self, row: usize) -> usize {
        self.start + row % self.seq_len
    }

    fn scale(&self, m: usize) -> f64 {
        self.log_scale_base.map_or(1.0, |b| rope::log_scale_unchecked(m, b))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Rope { x: Var, spec: RopeSpec },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Tensor },
    Ssd { a: Var, b: Var, c: Var, x: Var, layout: SsdLayout, init: Option<Vec<Vec<f64>>> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, normalize: Normalize, weights: Vec<Vec<f64>> },
    ConcatRows(Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) | Op::Sigmoid(a) | Op::Silu(a) => vec![*a],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Rope { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Ssd { a, b, c, x, .. } => vec![*a, *b, *c, *x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// A single-owner recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// Forward-only tape: nothing requires grad and no backward state is
    /// retained.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { strip_saved(op) };
        self.nodes.push(Node { value, op, requires_grad, is_param: false });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: rg, is_param: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, is_param: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = gemm(self.value(a), false, self.value(b), false)?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// `x[M×N] + bias[N]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xb = self.value(x);
        let bb = self.value(bias);
        if bb.len() != xb.last_dim() {
            return Err(Error::shape("add_bias", format!("bias {:?} vs {:?}", bb.shape(), xb.shape())));
        }
        let mut y = xb.clone();
        let d = y.last_dim();
        for row in y.data_mut().chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(bb.data()) {
                *v += b;
            }
        }
        Ok(self.push(y, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).scale(c);
        self.push(y, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let y = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push(y, Op::Mean(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(sigmoid);
        self.push(y, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x * sigmoid(x));
        self.push(y, Op::Silu(a))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid("rmsnorm eps must be positive"));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let d = xv.last_dim();
        if g.len() != d {
            return Err(Error::shape("rmsnorm", format!("gain {:?} vs {:?}", g.shape(), xv.shape())));
        }
        let mut y = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for row in y.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            for (v, gv) in row.iter_mut().zip(g.data()) {
                *v *= r * gv;
            }
            inv.push(r);
        }
        Ok(self.push(y, Op::RmsNorm { x, gain, inv_rms: inv }))
    }

    /// Rotates each head of each row at its sequence position.
    pub fn rope(&mut self, x: Var, spec: RopeSpec) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        if spec.head_dim != spec.table.dim() || !w.is_multiple_of(spec.head_dim) || spec.seq_len == 0 {
            return Err(Error::shape("rope", format!("width {w}, head dim {}, rotary dim {}", spec.head_dim, spec.table.dim())));
        }
        if !xv.rows().is_multiple_of(spec.seq_len) {
            return Err(Error::shape("rope", "rows are not a whole number of sequences"));
        }
        let mut y = xv.clone();
        for (r, row) in y.data_mut().chunks_mut(w).enumerate() {
            let m = spec.position(r);
            let s = spec.scale(m);
            for h in row.chunks_mut(spec.head_dim) {
                rope::rotate_slice(h, m, &spec.table, false);
                if s != 1.0 {
                    h.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        Ok(self.push(y, Op::Rope { x, spec }))
    }

    /// Gathers rows of `table[vocab×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = tv.dims2("embedding")?;
        let mut y = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(format!("token id {id} >= vocab {vocab}")));
            }
            y.extend_from_slice(tv.row(id));
        }
        let y = Tensor::new([ids.len(), d], y)?;
        Ok(self.push(y, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dims2("cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy mask is empty"));
        }
        let mut probs = Tensor::zeros([rows, vocab]);
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(Error::invalid(format!("target {} >= vocab {vocab}", targets[r])));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pr = probs.row_mut(r);
            let mut z = 0.0;
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            pr.iter_mut().for_each(|p| *p /= z);
            total += -(row[targets[r]] - max - z.ln());
        }
        let y = Tensor::scalar(total / count as f64);
        y.check_finite("cross_entropy")?;
        Ok(self.push(y, Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs }))
    }

    /// Batched multi-head SSD on already-rotated `b`, `c`. Returns the output
    /// and the final per-(batch, head) states.
    pub fn ssd(
        &mut self,
        a: Var,
        b: Var,
        c: Var,
        x: Var,
        layout: SsdLayout,
        chunk_len: usize,
        init: Option<Vec<Vec<f64>>>,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let (y, finals) = ssd::ssd_multihead_forward(
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(x),
            layout,
            chunk_len,
            init.as_deref(),
        )?;
        Ok((self.push(y, Op::Ssd { a, b, c, x, layout, init }), finals))
    }

    /// Batched multi-head causal attention on already-rotated `q`, `k`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout, normalize: Normalize) -> Result<Var> {
        let keep = self.grad_enabled;
        let (y, weights) =
            attention::attention_multihead_forward(self.value(q), self.value(k), self.value(v), layout, normalize, keep)?;
        Ok(self.push(y, Op::Attention { q, k, v, layout, normalize, weights }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_rows(&ts)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(Error::Cycle { node: id, input: input.0 });
                }
            }
            let contributions = self.node_backward(node, &g)?;
            for (input, dg) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dg)?,
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[id] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_param)
            .map(|(i, n)| {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { params })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, gemm(g, false, val(*b), true)?),
                (*b, gemm(val(*a), true, g, false)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(x, bias) => {
                let d = g.last_dim();
                let mut db = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let db = Tensor::new(val(*bias).shape().to_vec(), db)?;
                vec![(*x, g.clone()), (*bias, db)]
            }
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item() / n))]
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                vec![(*a, y.zip_map(g, "sigmoid'", |s, gv| gv * s * (1.0 - s))?)]
            }
            Op::Silu(a) => {
                let dx = val(*a).zip_map(g, "silu'", |x, gv| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })?;
                vec![(*a, dx)]
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = val(*x);
                let gv = val(*gain);
                let d = xv.last_dim();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let mut dgain = vec![0.0; d];
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += gr[c] * gv.data()[c] * xr[c];
                        dgain[c] += gr[c] * xr[c] * ir;
                    }
                    let k = ir * ir * ir * dot / d as f64;
                    let dr = dx.row_mut(r);
                    for c in 0..d {
                        dr[c] = ir * gr[c] * gv.data()[c] - k * xr[c];
                    }
                }
                vec![(*x, dx), (*gain, Tensor::new(gv.shape().to_vec(), dgain)?)]
            }
            Op::Rope { x, spec } => {
                let mut dx = g.clone();
                let w = dx.last_dim();
                for (r, row) in dx.data_mut().chunks_mut(w).enumerate() {
                    let m = spec.position(r);
                    let s = spec.scale(m);
                    for h in row.chunks_mut(spec.head_dim) {
                        rope::rotate_slice(h, m, &spec.table, true);
                        if s != 1.0 {
                            h.iter_mut().for_each(|v| *v *= s);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Embedding { table, ids } => {
                let mut dt = Tensor::zeros(val(*table).shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                vec![(*table, dt)]
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g.item() / count;
                let mut dl = probs.clone();
                for (r, &m) in mask.iter().enumerate() {
                    let row = dl.row_mut(r);
                    if m {
                        row[targets[r]] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                }
                vec![(*logits, dl)]
            }
            Op::Ssd { a, b, c, x, layout, init } => {
                let [da, db, dc, dx] =
                    ssd::ssd_multihead_backward(val(*a), val(*b), val(*c), val(*x), *layout, init.as_deref(), g)?;
                vec![(*a, da), (*b, db), (*c, dc), (*x, dx)]
            }
            Op::Attention { q, k, v, layout, normalize, weights } => {
                let [dq, dk, dv] =
                    attention::attention_multihead_backward(val(*q), val(*k), val(*v), *layout, *normalize, weights, g)?;
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let n = val(p).rows();
                    out.push((p, g.row_range(start, n)));
                    start += n;
                }
                out
            }
        })
    }
}

/// Drops backward-only payloads from ops that will never be differentiated.
fn strip_saved(op: Op) -> Op {
    match op {
        Op::CrossEntropy { logits, targets, mask, .. } => {
            Op::CrossEntropy { logits, targets, mask, probs: Tensor::zeros([0]) }
        }
        Op::Attention { q, k, v, layout, normalize, .. } => {
            Op::Attention { q, k, v, layout, normalize, weights: vec![] }
        }
        Op::RmsNorm { x, gain, .. } => Op::RmsNorm { x, gain, inv_rms: vec![] },
        other => other,
    }
}

/// Gradients for every parameter leaf of a tape, zero where unreached.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == v).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.params.iter().map(|(v, g)| (*v, g))
    }

    /// Consumes the map, returning gradients in parameter-creation order.
    pub fn into_vec(self) -> Vec<(Var, Tensor)> {
        self.params
    }

    pub fn global_norm(&self) -> f64 {
        self.params.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}
