//! Causal self-attention with rotary positions, in softmax form and in the
//! linear (recurrent) form.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{self, FrequencyTable};
use crate::tensor::Tensor;

/// Guard on the linear-attention denominator.
pub const LINEAR_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    /// Scaled by `1/sqrt(d)` and softmax-normalised per row.
    Softmax,
    /// Raw masked scores, no scaling.
    None,
}

#[derive(Clone, Debug)]
pub struct AttentionInputs {
    /// `[T×(heads·d)]`
    pub q: Tensor,
    /// `[T×(heads·d)]`
    pub k: Tensor,
    /// `[T×(heads·P)]`
    pub v: Tensor,
    pub n_heads: usize,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, n_heads: usize) -> Result<Self> {
        let (tq, dq) = q.dims2("AttentionInputs")?;
        let (tk, dk) = k.dims2("AttentionInputs")?;
        let (tv, dv) = v.dims2("AttentionInputs")?;
        if tq != tk || tk != tv || dq != dk {
            return Err(Error::shape("AttentionInputs", format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape())));
        }
        if n_heads == 0 || dq % n_heads != 0 || dv % n_heads != 0 {
            return Err(Error::shape("AttentionInputs", format!("{n_heads} heads do not divide widths {dq}/{dv}")));
        }
        if !(dq / n_heads).is_multiple_of(2) {
            return Err(Error::invalid(format!("per-head dim {} must be even", dq / n_heads)));
        }
        Ok(AttentionInputs { q, k, v, n_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.q.last_dim() / self.n_heads
    }

    pub fn value_dim(&self) -> usize {
        self.v.last_dim() / self.n_heads
    }
}

/// Causal attention over a whole sequence: rotate Q and K at positions
/// `0..T`, score, mask, (optionally) softmax, weight V.
pub fn causal_attention(inp: &AttentionInputs, table: &FrequencyTable, normalize: Normalize) -> Result<Tensor> {
    let dh = inp.head_dim();
    if dh != table.dim() {
        return Err(Error::shape("causal_attention", format!("head dim {dh} vs rotary dim {}", table.dim())));
    }
    let q = rotate_heads(&inp.q, dh, 0, table);
    let k = rotate_heads(&inp.k, dh, 0, table);
    let t = inp.q.rows();
    let layout = AttnLayout { batch: 1, tq: t, tk: t, heads: inp.n_heads, head_dim: dh, value_dim: inp.value_dim() };
    let (y, _) = attention_multihead_forward(&q, &k, &inp.v, layout, normalize, false)?;
    Ok(y)
}

/// Rotates every head of every row, row `r` at position `start + r`.
pub fn rotate_heads(x: &Tensor, head_dim: usize, start: usize, table: &FrequencyTable) -> Tensor {
    let mut out = x.clone();
    let w = x.last_dim();
    for (r, row) in out.data_mut().chunks_mut(w).enumerate() {
        for h in row.chunks_mut(head_dim) {
            rope::rotate_slice(h, start + r, table, false);
        }
    }
    out
}

/// Single-head causal attention on already-rotated slices.
///
/// Query `i` sits at key position `tk - tq + i` and sees keys up to and
/// including that position. `weights`, when given, receives the `tq×tk`
/// post-mask weight matrix.
#[allow(clippy::too_many_arguments)]
pub fn attention_kernel<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    tq: usize,
    tk: usize,
    d: usize,
    p: usize,
    normalize: Normalize,
    out: &mut [F],
    mut weights: Option<&mut [F]>,
) {
    let offset = tk - tq;
    let scale = match normalize {
        Normalize::Softmax => F::one() / F::from(d).unwrap().sqrt(),
        Normalize::None => F::one(),
    };
    let mut row = vec![F::zero(); tk];
    for i in 0..tq {
        let qi = &q[i * d..(i + 1) * d];
        let visible = offset + i + 1;
        let mut max = F::neg_infinity();
        for j in 0..visible {
            let kj = &k[j * d..(j + 1) * d];
            let mut s = F::zero();
            for c in 0..d {
                s = s + qi[c] * kj[c];
            }
            row[j] = s * scale;
            if row[j] > max {
                max = row[j];
            }
        }
        if normalize == Normalize::Softmax {
            let mut total = F::zero();
            for w in &mut row[..visible] {
                *w = (*w - max).exp();
                total = total + *w;
            }
            for w in &mut row[..visible] {
                *w = *w / total;
            }
        }
        let oi = &mut out[i * p..(i + 1) * p];
        oi.iter_mut().for_each(|o| *o = F::zero());
        for j in 0..visible {
            let w = row[j];
            let vj = &v[j * p..(j + 1) * p];
            for (o, &vv) in oi.iter_mut().zip(vj) {
                *o = *o + w * vv;
            }
        }
        if let Some(ws) = weights.as_deref_mut() {
            let wr = &mut ws[i * tk..(i + 1) * tk];
            wr[..visible].copy_from_slice(&row[..visible]);
            wr[visible..].iter_mut().for_each(|w| *w = F::zero());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub value_dim: usize,
}

impl AttnLayout {
    fn check(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
        let want = [
            (q, self.batch * self.tq, self.heads * self.head_dim),
            (k, self.batch * self.tk, self.heads * self.head_dim),
            (v, self.batch * self.tk, self.heads * self.value_dim),
        ];
        for (t, r, c) in want {
            if t.shape() != [r, c] {
                return Err(Error::shape("attention", format!("expected [{r}, {c}], got {:?}", t.shape())));
            }
        }
        if self.tk < self.tq {
            return Err(Error::shape("attention", "fewer keys than queries"));
        }
        Ok(())
    }
}

fn gather(t: &Tensor, bi: usize, hi: usize, len: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * width);
    for s in 0..len {
        out.extend_from_slice(&t.row(bi * len + s)[hi * width..(hi + 1) * width]);
    }
    out
}

fn scatter(t: &mut Tensor, bi: usize, hi: usize, len: usize, width: usize, src: &[f64]) {
    for s in 0..len {
        t.row_mut(bi * len + s)[hi * width..(hi + 1) * width].copy_from_slice(&src[s * width..(s + 1) * width]);
    }
}

/// Batched multi-head attention on rotated inputs. When `keep_weights` is
/// set, the per-(batch, head) weight matrices are returned for backward.
pub fn attention_multihead_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    l: AttnLayout,
    normalize: Normalize,
    keep_weights: bool,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    l.check(q, k, v)?;
    let mut y = Tensor::zeros([l.batch * l.tq, l.heads * l.value_dim]);
    let mut all = Vec::new();
    let mut out = vec![0.0; l.tq * l.value_dim];
    for bi in 0..l.batch {
        for hi in 0..l.heads {
            let qh = gather(q, bi, hi, l.tq, l.head_dim);
            let kh = gather(k, bi, hi, l.tk, l.head_dim);
            let vh = gather(v, bi, hi, l.tk, l.value_dim);
            let mut w = if keep_weights { vec![0.0; l.tq * l.tk] } else { vec![] };
            attention_kernel(
                &qh,
                &kh,
                &vh,
                l.tq,
                l.tk,
                l.head_dim,
                l.value_dim,
                normalize,
                &mut out,
                keep_weights.then_some(w.as_mut_slice()),
            );
            scatter(&mut y, bi, hi, l.tq, l.value_dim, &out);
            if keep_weights {
                all.push(w);
            }
        }
    }
    y.check_finite("attention")?;
    Ok((y, all))
}

/// Gradients with respect to the rotated `q`, `k` and `v`.
pub fn attention_multihead_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    l: AttnLayout,
    normalize: Normalize,
    weights: &[Vec<f64>],
    dy: &Tensor,
) -> Result<[Tensor; 3]> {
    l.check(q, k, v)?;
    let (d, p, tq, tk) = (l.head_dim, l.value_dim, l.tq, l.tk);
    let scale = match normalize {
        Normalize::Softmax => 1.0 / (d as f64).sqrt(),
        Normalize::None => 1.0,
    };
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut dv = Tensor::zeros(v.shape().to_vec());
    let offset = tk - tq;
    for bi in 0..l.batch {
        for hi in 0..l.heads {
            let w = &weights[bi * l.heads + hi];
            let qh = gather(q, bi, hi, tq, d);
            let kh = gather(k, bi, hi, tk, d);
            let vh = gather(v, bi, hi, tk, p);
            let dyh = gather(dy, bi, hi, tq, p);
            let mut dqh = vec![0.0; tq * d];
            let mut dkh = vec![0.0; tk * d];
            let mut dvh = vec![0.0; tk * p];
            let mut dw = vec![0.0; tk];
            for i in 0..tq {
                let visible = offset + i + 1;
                let wi = &w[i * tk..(i + 1) * tk];
                let dyi = &dyh[i * p..(i + 1) * p];
                for j in 0..visible {
                    let vj = &vh[j * p..(j + 1) * p];
                    dw[j] = dyi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dvj = &mut dvh[j * p..(j + 1) * p];
                    for (o, &g) in dvj.iter_mut().zip(dyi) {
                        *o += wi[j] * g;
                    }
                }
                if normalize == Normalize::Softmax {
                    let inner: f64 = (0..visible).map(|j| dw[j] * wi[j]).sum();
                    for j in 0..visible {
                        dw[j] = wi[j] * (dw[j] - inner);
                    }
                }
                let qi = &qh[i * d..(i + 1) * d];
                for j in 0..visible {
                    let g = dw[j] * scale;
                    let kj = &kh[j * d..(j + 1) * d];
                    let dqi = &mut dqh[i * d..(i + 1) * d];
                    for c in 0..d {
                        dqi[c] += g * kj[c];
                    }
                    let dkj = &mut dkh[j * d..(j + 1) * d];
                    for c in 0..d {
                        dkj[c] += g * qi[c];
                    }
                }
            }
            scatter(&mut dq, bi, hi, tq, d, &dqh);
            scatter(&mut dk, bi, hi, tk, d, &dkh);
            scatter(&mut dv, bi, hi, tk, p, &dvh);
        }
    }
    Ok([dq, dk, dv])
}

/// Feature map applied to rotated queries and keys in linear attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    Identity,
    /// `elu(x) + 1`, strictly positive.
    EluPlusOne,
}

impl FeatureMap {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            FeatureMap::Identity => x,
            FeatureMap::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    pub fn apply_vec(self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.apply(v)).collect()
    }
}

/// Running sums for linear attention: `S = Σ φ(k_j)ᵀ v_j`, `z = Σ φ(k_j)`.
#[derive(Clone, Debug)]
pub struct RecurrentAttnState {
    pub s: Tensor,
    pub z: Tensor,
    pub position: usize,
    /// Steps where the denominator fell under [`LINEAR_EPS`].
    pub guard_hits: usize,
}

impl RecurrentAttnState {
    pub fn new(d: usize, p: usize) -> Self {
        RecurrentAttnState { s: Tensor::zeros([d, p]), z: Tensor::zeros([d]), position: 0, guard_hits: 0 }
    }
}

/// One decoding step of linear attention at position `m`.
///
/// The key-side map `fmap_k` and query-side map `fmap_q` may differ. If the
/// denominator is below [`LINEAR_EPS`] in magnitude, the unnormalised
/// numerator is returned and `guard_hits` is incremented.
#[allow(clippy::too_many_arguments)]
pub fn linear_attention_step(
    state: &mut RecurrentAttnState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    m: usize,
    table: &FrequencyTable,
    fmap_q: FeatureMap,
    fmap_k: FeatureMap,
) -> Result<Vec<f64>> {
    let (d, p) = state.s.dims2("linear_attention_step")?;
    if state.position != m {
        return Err(Error::CachePosition { cache: state.position, input: m });
    }
    if q.len() != d || k.len() != d || v.len() != p || d != table.dim() {
        return Err(Error::shape("linear_attention_step", "q/k/v lengths do not match state"));
    }
    let mut qr = q.to_vec();
    let mut kr = k.to_vec();
    rope::rotate_slice(&mut qr, m, table, false);
    rope::rotate_slice(&mut kr, m, table, false);
    let fq = fmap_q.apply_vec(&qr);
    let fk = fmap_k.apply_vec(&kr);
    {
        let s = state.s.data_mut();
        for i in 0..d {
            for j in 0..p {
                s[i * p + j] += fk[i] * v[j];
            }
        }
    }
    for (z, f) in state.z.data_mut().iter_mut().zip(&fk) {
        *z += f;
    }
    let mut num = vec![0.0; p];
    for i in 0..d {
        let row = state.s.row(i);
        for j in 0..p {
            num[j] += fq[i] * row[j];
        }
    }
    let den: f64 = fq.iter().zip(state.z.data()).map(|(a, b)| a * b).sum();
    state.position += 1;
    if den.abs() < LINEAR_EPS {
        state.guard_hits += 1;
        return Ok(num);
    }
    Ok(num.into_iter().map(|x| x / den).collect())
}

/// Linear attention over a sequence by repeated stepping; single head.
pub fn linear_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    table: &FrequencyTable,
    fmap_q: FeatureMap,
    fmap_k: FeatureMap,
) -> Result<(Tensor, RecurrentAttnState)> {
    let (t, d) = q.dims2("linear_attention")?;
    let (_, p) = v.dims2("linear_attention")?;
    let mut st = RecurrentAttnState::new(d, p);
    let mut y = Tensor::zeros([t, p]);
    for m in 0..t {
        let out = linear_attention_step(&mut st, q.row(m), k.row(m), v.row(m), m, table, fmap_q, fmap_k)?;
        y.row_mut(m).copy_from_slice(&out);
    }
    Ok((y, st))
}
