//! State-space duality with a scalar decay per step.
//!
//! One head computes
//!
//! ```text
//! h_t = a_t * h_{t-1} + B_t^T x_t        (h is N×P, h_{-1} = 0)
//! y_t = C_t h_t
//! ```
//!
//! which unrolls to `Y = (L ∘ C Bᵀ) X` with the decay mask
//! `L[j][i] = a_j ... a_{i+1}`. Three evaluation orders are provided: a
//! sequential scan with O(N·P) state, the explicit T×T matrix, and a chunked
//! scan that uses the matrix form inside a chunk and carries state between
//! chunks. When rotary embedding is on, `B_t` and `C_t` are rotated at their
//! own absolute positions before either form runs.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rope::{self, FrequencyTable};
use crate::tensor::Tensor;

/// Largest sequence the explicit T×T form accepts.
pub const MATRIX_FORM_MAX_LEN: usize = 4096;

#[derive(Clone, Debug)]
pub struct SsdInputs {
    /// `[T]`, each in `(0, 1]`.
    pub a: Tensor,
    /// `[T×N]`
    pub b: Tensor,
    /// `[T×N]`
    pub c: Tensor,
    /// `[T×P]`
    pub x: Tensor,
}

impl SsdInputs {
    pub fn new(a: Tensor, b: Tensor, c: Tensor, x: Tensor) -> Result<Self> {
        let inp = SsdInputs { a, b, c, x };
        inp.validate()?;
        Ok(inp)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.a.len();
        if self.a.ndim() != 1 {
            return Err(Error::shape("SsdInputs", format!("a must be a vector, got {:?}", self.a.shape())));
        }
        let (tb, n) = self.b.dims2("SsdInputs")?;
        let (tc, nc) = self.c.dims2("SsdInputs")?;
        let (tx, _) = self.x.dims2("SsdInputs")?;
        if tb != t || tc != t || tx != t {
            return Err(Error::shape("SsdInputs", format!("sequence lengths a={t} b={tb} c={tc} x={tx}")));
        }
        if n != nc {
            return Err(Error::shape("SsdInputs", format!("state dims b={n} c={nc}")));
        }
        check_decay(self.a.data())
    }

    pub fn seq_len(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.b.last_dim()
    }

    pub fn channels(&self) -> usize {
        self.x.last_dim()
    }

    /// B and C rotated at positions `0..T` when `use_rope`, else unchanged.
    fn rotated_bc(&self, table: &FrequencyTable, use_rope: bool) -> Result<(Tensor, Tensor)> {
        if !use_rope {
            return Ok((self.b.clone(), self.c.clone()));
        }
        Ok((rope::rotate_sequence(&self.b, 0, table)?, rope::rotate_sequence(&self.c, 0, table)?))
    }
}

fn check_decay(a: &[f64]) -> Result<()> {
    match a.iter().position(|&v| !(v > 0.0 && v <= 1.0)) {
        Some(t) => Err(Error::invalid(format!("decay a[{t}] = {} outside (0, 1]", a[t]))),
        None => Ok(()),
    }
}

/// Lower-triangular decay mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMask(pub Tensor);

impl DecayMask {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `L[j][i] = a_j a_{j-1} ... a_{i+1}` for `j >= i`, zero above the diagonal.
pub fn decay_mask(a: &Tensor) -> Result<DecayMask> {
    check_decay(a.data())?;
    let t = a.len();
    let a = a.data();
    let mut l = Tensor::zeros([t, t]);
    let d = l.data_mut();
    for j in 0..t {
        let mut prod = 1.0;
        d[j * t + j] = 1.0;
        for i in (0..j).rev() {
            prod *= a[i + 1];
            d[j * t + i] = prod;
        }
    }
    Ok(DecayMask(l))
}

/// `S[m][n] = <rotate(C_m, m), rotate(B_n, n)>` over all pairs.
pub fn ssd_rope_scores(c: &Tensor, b: &Tensor, table: &FrequencyTable) -> Result<Tensor> {
    if c.shape() != b.shape() {
        return Err(Error::shape("ssd_rope_scores", format!("{:?} vs {:?}", c.shape(), b.shape())));
    }
    let cr = rope::rotate_sequence(c, 0, table)?;
    let br = rope::rotate_sequence(b, 0, table)?;
    crate::tensor::gemm(&cr, false, &br, true)
}

/// Sequential scan, O(T·N·P) time and O(N·P) state.
pub fn ssd_recurrent(inp: &SsdInputs, table: &FrequencyTable, use_rope: bool) -> Result<Tensor> {
    inp.validate()?;
    check_rope_dim(inp, table, use_rope)?;
    let (t, n, p) = (inp.seq_len(), inp.state_dim(), inp.channels());
    let mut scan = RecurrentSsd::new(n, p);
    let mut y = Tensor::zeros([t, p]);
    for s in 0..t {
        let out = scan.step(
            inp.a.data()[s],
            inp.b.row(s),
            inp.c.row(s),
            inp.x.row(s),
            use_rope.then_some(table),
        )?;
        y.row_mut(s).copy_from_slice(&out);
    }
    Ok(y)
}

/// Explicit `Y = (L ∘ S) X`; verification path, T ≤ [`MATRIX_FORM_MAX_LEN`].
pub fn ssd_matrix(inp: &SsdInputs, table: &FrequencyTable, use_rope: bool) -> Result<Tensor> {
    inp.validate()?;
    check_rope_dim(inp, table, use_rope)?;
    if inp.seq_len() > MATRIX_FORM_MAX_LEN {
        return Err(Error::invalid(format!(
            "matrix form limited to T <= {MATRIX_FORM_MAX_LEN}, got {}",
            inp.seq_len()
        )));
    }
    let (b, c) = inp.rotated_bc(table, use_rope)?;
    let scores = crate::tensor::gemm(&c, false, &b, true)?;
    let l = decay_mask(&inp.a)?;
    let m = l.0.mul(&scores)?;
    crate::tensor::matmul(&m, &inp.x)
}

/// Chunked scan: matrix form within each chunk, recurrent carry across.
pub fn ssd_chunked(inp: &SsdInputs, table: &FrequencyTable, use_rope: bool, chunk_len: usize) -> Result<Tensor> {
    inp.validate()?;
    check_rope_dim(inp, table, use_rope)?;
    if chunk_len == 0 {
        return Err(Error::invalid("chunk_len must be >= 1"));
    }
    let (b, c) = inp.rotated_bc(table, use_rope)?;
    let (t, n, p) = (inp.seq_len(), inp.state_dim(), inp.channels());
    let mut h = vec![0.0; n * p];
    let mut y = vec![0.0; t * p];
    let view = HeadView { a: inp.a.data(), b: b.data(), c: c.data(), x: inp.x.data(), t, n, p };
    chunked_scan(&view, chunk_len, &mut h, &mut y);
    let y = Tensor::new([t, p], y)?;
    y.check_finite("ssd_chunked")?;
    Ok(y)
}

fn check_rope_dim(inp: &SsdInputs, table: &FrequencyTable, use_rope: bool) -> Result<()> {
    if use_rope && inp.state_dim() != table.dim() {
        return Err(Error::shape(
            "ssd",
            format!("state dim {} vs rotary dim {}", inp.state_dim(), table.dim()),
        ));
    }
    Ok(())
}

/// Single-step form of the scan with an explicit, fixed-size state.
#[derive(Clone, Debug)]
pub struct RecurrentSsd {
    n: usize,
    p: usize,
    state: Vec<f64>,
    position: usize,
    scratch: Vec<f64>,
}

impl RecurrentSsd {
    pub fn new(n: usize, p: usize) -> Self {
        RecurrentSsd { n, p, state: vec![0.0; n * p], position: 0, scratch: vec![0.0; 2 * n] }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// `N×P` state, row-major.
    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn state_bytes(&self) -> usize {
        self.state.len() * std::mem::size_of::<f64>()
    }

    /// Consumes one token; rotates `b` and `c` at the current position when
    /// `table` is given.
    pub fn step(&mut self, a: f64, b: &[f64], c: &[f64], x: &[f64], table: Option<&FrequencyTable>) -> Result<Vec<f64>> {
        let (n, p) = (self.n, self.p);
        if b.len() != n || c.len() != n || x.len() != p {
            return Err(Error::shape("RecurrentSsd::step", "b/c/x lengths do not match state"));
        }
        check_decay(&[a])?;
        let (bb, cc) = self.scratch.split_at_mut(n);
        bb.copy_from_slice(b);
        cc.copy_from_slice(c);
        if let Some(table) = table {
            rope::rotate_slice(bb, self.position, table, false);
            rope::rotate_slice(cc, self.position, table, false);
        }
        let mut y = vec![0.0; p];
        recurrent_step(&mut self.state, a, bb, cc, x, &mut y);
        if !self.state.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("RecurrentSsd::step"));
        }
        self.position += 1;
        Ok(y)
    }
}

#[inline]
fn recurrent_step<F: Float>(h: &mut [F], a: F, b: &[F], c: &[F], x: &[F], y: &mut [F]) {
    let p = x.len();
    for (ni, row) in h.chunks_mut(p).enumerate() {
        let bn = b[ni];
        let cn = c[ni];
        for ((hv, &xv), yv) in row.iter_mut().zip(x).zip(y.iter_mut()) {
            *hv = a * *hv + bn * xv;
            *yv = *yv + cn * *hv;
        }
    }
}

/// One head's inputs as flat row-major slices, B and C already rotated.
pub struct HeadView<'a, F> {
    pub a: &'a [F],
    pub b: &'a [F],
    pub c: &'a [F],
    pub x: &'a [F],
    pub t: usize,
    pub n: usize,
    pub p: usize,
}

/// Sequential scan over a head, continuing from state `h`.
pub fn recurrent_scan<F: Float>(v: &HeadView<'_, F>, h: &mut [F], y: &mut [F]) {
    let (n, p) = (v.n, v.p);
    for s in 0..v.t {
        let ys = &mut y[s * p..(s + 1) * p];
        ys.iter_mut().for_each(|o| *o = F::zero());
        recurrent_step(h, v.a[s], &v.b[s * n..(s + 1) * n], &v.c[s * n..(s + 1) * n], &v.x[s * p..(s + 1) * p], ys);
    }
}

/// Chunked scan over a head, continuing from state `h` (updated in place).
///
/// Decay products are formed as differences of per-chunk cumulative
/// log-decays, so long chunks of small `a` do not underflow mid-product.
pub fn chunked_scan<F: Float>(v: &HeadView<'_, F>, chunk_len: usize, h: &mut [F], y: &mut [F]) {
    let (n, p) = (v.n, v.p);
    let mut cum = vec![F::zero(); chunk_len.min(v.t)];
    let mut start = 0;
    while start < v.t {
        let len = chunk_len.min(v.t - start);
        let mut acc = F::zero();
        for k in 0..len {
            acc = acc + v.a[start + k].ln();
            cum[k] = acc;
        }
        for j in 0..len {
            let cj = &v.c[(start + j) * n..(start + j + 1) * n];
            let yj = &mut y[(start + j) * p..(start + j + 1) * p];
            // carried state
            let carry = cum[j].exp();
            for (o, yv) in yj.iter_mut().enumerate() {
                let mut s = F::zero();
                for ni in 0..n {
                    s = s + cj[ni] * h[ni * p + o];
                }
                *yv = carry * s;
            }
            // within chunk
            for i in 0..=j {
                let bi = &v.b[(start + i) * n..(start + i + 1) * n];
                let mut score = F::zero();
                for ni in 0..n {
                    score = score + cj[ni] * bi[ni];
                }
                let w = (cum[j] - cum[i]).exp() * score;
                let xi = &v.x[(start + i) * p..(start + i + 1) * p];
                for (yv, &xv) in yj.iter_mut().zip(xi) {
                    *yv = *yv + w * xv;
                }
            }
        }
        // state at chunk end
        let last = cum[len - 1];
        let carry = last.exp();
        h.iter_mut().for_each(|hv| *hv = carry * *hv);
        for i in 0..len {
            let w = (last - cum[i]).exp();
            let bi = &v.b[(start + i) * n..(start + i + 1) * n];
            let xi = &v.x[(start + i) * p..(start + i + 1) * p];
            for ni in 0..n {
                let coef = w * bi[ni];
                for (hv, &xv) in h[ni * p..(ni + 1) * p].iter_mut().zip(xi) {
                    *hv = *hv + coef * xv;
                }
            }
        }
        start += len;
    }
}

/// Layout of the batched multi-head SSD inputs used by the blocks.
///
/// `a` is `[batch*seq, heads]`, `b`/`c` are `[batch*seq, heads*state_dim]`,
/// `x` and the output are `[batch*seq, heads*head_dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsdLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub state_dim: usize,
    pub head_dim: usize,
}

impl SsdLayout {
    fn check(&self, a: &Tensor, b: &Tensor, c: &Tensor, x: &Tensor) -> Result<()> {
        let rows = self.batch * self.seq_len;
        let want = [
            (a, self.heads),
            (b, self.heads * self.state_dim),
            (c, self.heads * self.state_dim),
            (x, self.heads * self.head_dim),
        ];
        for (t, cols) in want {
            if t.shape() != [rows, cols] {
                return Err(Error::shape("ssd_multihead", format!("expected [{rows}, {cols}], got {:?}", t.shape())));
            }
        }
        Ok(())
    }

    fn state_len(&self) -> usize {
        self.state_dim * self.head_dim
    }
}

struct HeadBuffers {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    x: Vec<f64>,
}

fn gather_head(l: &SsdLayout, bi: usize, hi: usize, a: &Tensor, b: &Tensor, c: &Tensor, x: &Tensor) -> HeadBuffers {
    let (t, n, p) = (l.seq_len, l.state_dim, l.head_dim);
    let mut hb = HeadBuffers {
        a: Vec::with_capacity(t),
        b: Vec::with_capacity(t * n),
        c: Vec::with_capacity(t * n),
        x: Vec::with_capacity(t * p),
    };
    for s in 0..t {
        let r = bi * t + s;
        hb.a.push(a.row(r)[hi]);
        hb.b.extend_from_slice(&b.row(r)[hi * n..(hi + 1) * n]);
        hb.c.extend_from_slice(&c.row(r)[hi * n..(hi + 1) * n]);
        hb.x.extend_from_slice(&x.row(r)[hi * p..(hi + 1) * p]);
    }
    hb
}

fn scatter_head(out: &mut Tensor, bi: usize, hi: usize, t: usize, width: usize, src: &[f64]) {
    for s in 0..t {
        out.row_mut(bi * t + s)[hi * width..(hi + 1) * width].copy_from_slice(&src[s * width..(s + 1) * width]);
    }
}

/// Batched multi-head chunked SSD (B and C already rotated).
///
/// `init` holds one `N×P` state per `(batch, head)` in batch-major order;
/// the returned states follow the same order.
pub fn ssd_multihead_forward(
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    x: &Tensor,
    layout: SsdLayout,
    chunk_len: usize,
    init: Option<&[Vec<f64>]>,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    layout.check(a, b, c, x)?;
    check_decay(a.data())?;
    if chunk_len == 0 {
        return Err(Error::invalid("chunk_len must be >= 1"));
    }
    let n_states = layout.batch * layout.heads;
    if let Some(init) = init {
        if init.len() != n_states || init.iter().any(|s| s.len() != layout.state_len()) {
            return Err(Error::shape("ssd_multihead", "initial state count or size mismatch"));
        }
    }
    let (t, n, p) = (layout.seq_len, layout.state_dim, layout.head_dim);
    let mut y = Tensor::zeros([layout.batch * t, layout.heads * p]);
    let mut finals = Vec::with_capacity(n_states);
    let mut yh = vec![0.0; t * p];
    for bi in 0..layout.batch {
        for hi in 0..layout.heads {
            let hb = gather_head(&layout, bi, hi, a, b, c, x);
            let mut h = match init {
                Some(init) => init[bi * layout.heads + hi].clone(),
                None => vec![0.0; n * p],
            };
            let view = HeadView { a: &hb.a, b: &hb.b, c: &hb.c, x: &hb.x, t, n, p };
            chunked_scan(&view, chunk_len, &mut h, &mut yh);
            scatter_head(&mut y, bi, hi, t, p, &yh);
            finals.push(h);
        }
    }
    y.check_finite("ssd_multihead_forward")?;
    Ok((y, finals))
}

/// Gradients of the batched SSD output with respect to `a`, `b`, `c`, `x`.
///
/// States are recomputed with a forward scan and then walked backwards:
/// `dh_t = C_tᵀ dy_t + a_{t+1} dh_{t+1}`.
#[allow(clippy::too_many_arguments)]
pub fn ssd_multihead_backward(
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    x: &Tensor,
    layout: SsdLayout,
    init: Option<&[Vec<f64>]>,
    dy: &Tensor,
) -> Result<[Tensor; 4]> {
    layout.check(a, b, c, x)?;
    let (t, n, p) = (layout.seq_len, layout.state_dim, layout.head_dim);
    let mut da = Tensor::zeros(a.shape().to_vec());
    let mut db = Tensor::zeros(b.shape().to_vec());
    let mut dc = Tensor::zeros(c.shape().to_vec());
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let np = n * p;
    let mut states = vec![0.0; (t + 1) * np];
    let (mut gda, mut gdb, mut gdc, mut gdx) = (vec![0.0; t], vec![0.0; t * n], vec![0.0; t * n], vec![0.0; t * p]);
    for bi in 0..layout.batch {
        for hi in 0..layout.heads {
            let hb = gather_head(&layout, bi, hi, a, b, c, x);
            // states[0] is h_{-1}, states[s + 1] is h_s
            match init {
                Some(init) => states[..np].copy_from_slice(&init[bi * layout.heads + hi]),
                None => states[..np].iter_mut().for_each(|v| *v = 0.0),
            }
            for s in 0..t {
                let (prev, next) = states.split_at_mut((s + 1) * np);
                let prev = &prev[s * np..];
                let next = &mut next[..np];
                let at = hb.a[s];
                for ni in 0..n {
                    let bn = hb.b[s * n + ni];
                    for pi in 0..p {
                        next[ni * p + pi] = at * prev[ni * p + pi] + bn * hb.x[s * p + pi];
                    }
                }
            }
            let mut dh = vec![0.0; np];
            for s in (0..t).rev() {
                let r = bi * t + s;
                let dys = &dy.row(r)[hi * p..(hi + 1) * p];
                let cs = &hb.c[s * n..(s + 1) * n];
                let bs = &hb.b[s * n..(s + 1) * n];
                let xs = &hb.x[s * p..(s + 1) * p];
                let hs = &states[(s + 1) * np..(s + 2) * np];
                let hprev = &states[s * np..(s + 1) * np];
                for ni in 0..n {
                    let row = &mut dh[ni * p..(ni + 1) * p];
                    let mut dcn = 0.0;
                    for pi in 0..p {
                        row[pi] += cs[ni] * dys[pi];
                        dcn += hs[ni * p + pi] * dys[pi];
                    }
                    gdc[s * n + ni] = dcn;
                }
                let mut dat = 0.0;
                for ni in 0..n {
                    let row = &dh[ni * p..(ni + 1) * p];
                    let mut dbn = 0.0;
                    for pi in 0..p {
                        dbn += row[pi] * xs[pi];
                        dat += row[pi] * hprev[ni * p + pi];
                    }
                    gdb[s * n + ni] = dbn;
                }
                for pi in 0..p {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        acc += bs[ni] * dh[ni * p + pi];
                    }
                    gdx[s * p + pi] = acc;
                }
                gda[s] = dat;
                let at = hb.a[s];
                dh.iter_mut().for_each(|v| *v *= at);
            }
            for s in 0..t {
                da.row_mut(bi * t + s)[hi] = gda[s];
            }
            scatter_head(&mut db, bi, hi, t, n, &gdb);
            scatter_head(&mut dc, bi, hi, t, n, &gdc);
            scatter_head(&mut dx, bi, hi, t, p, &gdx);
        }
    }
    Ok([da, db, dc, dx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn table(n: usize) -> FrequencyTable {
        FrequencyTable::new(n, rope::DEFAULT_BASE).unwrap()
    }

    fn random_inputs(rng: &mut Rng, t: usize, n: usize, p: usize, unit_decay: bool) -> SsdInputs {
        let a = if unit_decay { Tensor::ones([t]) } else { rng.uniform_tensor([t], 0.5, 1.0) };
        SsdInputs::new(a, rng.normal_tensor([t, n], 1.0), rng.normal_tensor([t, n], 1.0), rng.normal_tensor([t, p], 1.0))
            .unwrap()
    }

    #[test]
    fn mask_without_decay_is_causal_ones() {
        let l = decay_mask(&Tensor::ones([3])).unwrap();
        assert_eq!(l.tensor().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mask_hand_products() {
        let l = decay_mask(&Tensor::vector(vec![1.0, 0.5, 0.5])).unwrap();
        assert_eq!(l.tensor().data(), &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn mask_rejects_out_of_range() {
        assert!(decay_mask(&Tensor::vector(vec![1.0, 0.0, 0.5])).is_err());
        assert!(decay_mask(&Tensor::vector(vec![1.5])).is_err());
        assert!(decay_mask(&Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn single_step_is_c_dot_b_times_x() {
        let mut rng = Rng::new(11);
        let inp = random_inputs(&mut rng, 1, 4, 3, false);
        let y = ssd_recurrent(&inp, &table(4), true).unwrap();
        let cb = inp.c.dot(&inp.b).unwrap();
        for (yv, xv) in y.data().iter().zip(inp.x.data()) {
            assert!((yv - cb * xv).abs() < 1e-14);
        }
    }

    #[test]
    fn unit_everything_is_prefix_sum() {
        let t = 6;
        let x = Tensor::new([t, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let inp = SsdInputs::new(Tensor::ones([t]), Tensor::ones([t, 1]), Tensor::ones([t, 1]), x).unwrap();
        let dummy = table(2);
        let y = ssd_recurrent(&inp, &dummy, false).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 6.0, 10.0, 15.0, 21.0]);
    }

    #[test]
    fn matrix_hand_instance() {
        let inp = SsdInputs::new(
            Tensor::vector(vec![1.0, 0.5]),
            Tensor::ones([2, 1]),
            Tensor::ones([2, 1]),
            Tensor::new([2, 1], vec![2.0, 3.0]).unwrap(),
        )
        .unwrap();
        let y = ssd_matrix(&inp, &table(2), false).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0]);
    }

    #[test]
    fn three_forms_agree() {
        let mut rng = Rng::new(12);
        for &rope_on in &[false, true] {
            for &unit in &[false, true] {
                let inp = random_inputs(&mut rng, 16, 4, 4, unit);
                let tb = table(4);
                let r = ssd_recurrent(&inp, &tb, rope_on).unwrap();
                let m = ssd_matrix(&inp, &tb, rope_on).unwrap();
                let c = ssd_chunked(&inp, &tb, rope_on, 5).unwrap();
                assert!(r.max_abs_diff(&m) < 1e-10);
                assert!(r.max_abs_diff(&c) < 1e-10);
            }
        }
    }

    #[test]
    fn chunk_length_extremes() {
        let mut rng = Rng::new(13);
        let inp = random_inputs(&mut rng, 9, 4, 2, false);
        let tb = table(4);
        let m = ssd_matrix(&inp, &tb, true).unwrap();
        let r = ssd_recurrent(&inp, &tb, true).unwrap();
        assert!(ssd_chunked(&inp, &tb, true, 9).unwrap().max_abs_diff(&m) < 1e-12);
        assert!(ssd_chunked(&inp, &tb, true, 100).unwrap().max_abs_diff(&m) < 1e-12);
        assert!(ssd_chunked(&inp, &tb, true, 1).unwrap().max_abs_diff(&r) < 1e-12);
        assert!(ssd_chunked(&inp, &tb, true, 0).is_err());
    }

    #[test]
    fn long_sequence_chunked_matches_recurrent() {
        let mut rng = Rng::new(14);
        let inp = random_inputs(&mut rng, 256, 4, 4, false);
        let tb = table(4);
        let r = ssd_recurrent(&inp, &tb, true).unwrap();
        let c = ssd_chunked(&inp, &tb, true, 64).unwrap();
        assert!(r.max_abs_diff(&c) < 1e-9);
    }

    #[test]
    fn scores_diagonal_is_plain_dot() {
        let mut rng = Rng::new(15);
        let c = rng.normal_tensor([5, 4], 1.0);
        let b = rng.normal_tensor([5, 4], 1.0);
        let s = ssd_rope_scores(&c, &b, &table(4)).unwrap();
        for m in 0..5 {
            let plain: f64 = c.row(m).iter().zip(b.row(m)).map(|(x, y)| x * y).sum();
            assert!((s.at(m, m) - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_toeplitz_for_constant_rows() {
        let mut rng = Rng::new(16);
        let crow = rng.normal_tensor([4], 1.0);
        let brow = rng.normal_tensor([4], 1.0);
        let t = 8;
        let c = Tensor::from_rows(&vec![crow.data().to_vec(); t]).unwrap();
        let b = Tensor::from_rows(&vec![brow.data().to_vec(); t]).unwrap();
        let s = ssd_rope_scores(&c, &b, &table(4)).unwrap();
        for m in 1..t {
            for n in 1..t {
                assert!((s.at(m, n) - s.at(m - 1, n - 1)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn input_validation() {
        let bad = SsdInputs::new(Tensor::ones([3]), Tensor::ones([2, 2]), Tensor::ones([3, 2]), Tensor::ones([3, 1]));
        assert!(bad.is_err());
        let bad = SsdInputs::new(Tensor::vector(vec![1.0, 0.0]), Tensor::ones([2, 2]), Tensor::ones([2, 2]), Tensor::ones([2, 1]));
        assert!(bad.is_err());
        let inp = SsdInputs::new(Tensor::ones([2]), Tensor::ones([2, 2]), Tensor::ones([2, 2]), Tensor::ones([2, 1])).unwrap();
        assert!(ssd_recurrent(&inp, &table(4), true).is_err());
    }

    #[test]
    fn matrix_form_size_gate() {
        let t = MATRIX_FORM_MAX_LEN + 1;
        let inp = SsdInputs::new(Tensor::ones([t]), Tensor::zeros([t, 2]), Tensor::zeros([t, 2]), Tensor::zeros([t, 1])).unwrap();
        assert!(ssd_matrix(&inp, &table(2), false).is_err());
    }

    #[test]
    fn multihead_forward_matches_per_head_and_continues_state() {
        let mut rng = Rng::new(17);
        let layout = SsdLayout { batch: 2, seq_len: 7, heads: 3, state_dim: 4, head_dim: 2 };
        let rows = 14;
        let a = rng.uniform_tensor([rows, 3], 0.6, 1.0);
        let b = rng.normal_tensor([rows, 12], 1.0);
        let c = rng.normal_tensor([rows, 12], 1.0);
        let x = rng.normal_tensor([rows, 6], 1.0);
        let (y, _) = ssd_multihead_forward(&a, &b, &c, &x, layout, 3, None).unwrap();
        for bi in 0..2 {
            for hi in 0..3 {
                let rs = |t: &Tensor, w: usize| t.row_range(bi * 7, 7).cols(hi * w, w);
                let inp = SsdInputs::new(rs(&a, 1).reshape([7]).unwrap(), rs(&b, 4), rs(&c, 4), rs(&x, 2)).unwrap();
                let expect = ssd_recurrent(&inp, &table(4), false).unwrap();
                assert!(rs(&y, 2).max_abs_diff(&expect) < 1e-12);
            }
        }
        // splitting the sequence and carrying state reproduces the full run
        let one = SsdLayout { batch: 1, seq_len: 7, ..layout };
        let first = SsdLayout { batch: 1, seq_len: 4, ..layout };
        let second = SsdLayout { batch: 1, seq_len: 3, ..layout };
        let (full, _) = ssd_multihead_forward(&a.row_range(0, 7), &b.row_range(0, 7), &c.row_range(0, 7), &x.row_range(0, 7), one, 2, None).unwrap();
        let (y1, h1) = ssd_multihead_forward(&a.row_range(0, 4), &b.row_range(0, 4), &c.row_range(0, 4), &x.row_range(0, 4), first, 2, None).unwrap();
        let (y2, _) = ssd_multihead_forward(&a.row_range(4, 3), &b.row_range(4, 3), &c.row_range(4, 3), &x.row_range(4, 3), second, 2, Some(&h1)).unwrap();
        let joined = Tensor::concat_rows(&[&y1, &y2]).unwrap();
        assert!(joined.max_abs_diff(&full) < 1e-12);
    }
}
