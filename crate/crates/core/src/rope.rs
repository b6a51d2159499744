//! Rotary position embedding shared by attention (Q, K) and state-space
//! (C, B) projections.
//!
//! Pairs are consecutive: `(x0, x1), (x2, x3), ...`, each rotated by
//! `m * theta_i` with `theta_i = base^(-2i/d)`. Rotating both sides of an inner
//! product at their own absolute positions leaves a score that depends only
//! on the position difference.

use std::sync::atomic::{AtomicBool, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Role of a rotated vector. Every role goes through the same rotation; the
/// tag only exists so call sites say which projection they are rotating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Query,
    Key,
    /// SSD output projection, the query analogue.
    C,
    /// SSD input projection, the key analogue.
    B,
}

impl Role {
    /// Roles that receive the long-position scale when it is enabled.
    pub fn is_query_like(self) -> bool {
        matches!(self, Role::Query | Role::C)
    }
}

#[derive(Clone, Debug)]
pub struct FrequencyTable {
    d: usize,
    base: f64,
    theta: Vec<f64>,
    max_position: usize,
    // [position][pair], flattened
    cos: Vec<f64>,
    sin: Vec<f64>,
}

/// `theta_i = base^(-2i/d)` for `i` in `0..d/2`.
pub fn build_frequencies(d: usize, base: f64) -> Result<FrequencyTable> {
    FrequencyTable::new(d, base)
}

impl FrequencyTable {
    pub fn new(d: usize, base: f64) -> Result<Self> {
        Self::with_max_position(d, base, 0)
    }

    /// Table with cos/sin precomputed for positions `0..max_position`.
    pub fn with_max_position(d: usize, base: f64, max_position: usize) -> Result<Self> {
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::invalid(format!("rotary dimension must be even and >= 2, got {d}")));
        }
        if !(base > 0.0) || !base.is_finite() {
            return Err(Error::invalid(format!("rotary base must be positive, got {base}")));
        }
        let half = d / 2;
        let theta: Vec<f64> = (0..half)
            .map(|i| base.powf(-2.0 * i as f64 / d as f64))
            .collect();
        let mut table = FrequencyTable { d, base, theta, max_position: 0, cos: vec![], sin: vec![] };
        table.fill_cache(max_position);
        Ok(table)
    }

    fn fill_cache(&mut self, max_position: usize) {
        let half = self.d / 2;
        self.cos = Vec::with_capacity(max_position * half);
        self.sin = Vec::with_capacity(max_position * half);
        for m in 0..max_position {
            for &t in &self.theta {
                let angle = m as f64 * t;
                self.cos.push(angle.cos());
                self.sin.push(angle.sin());
            }
        }
        self.max_position = max_position;
    }

    /// A new table whose cache covers at least `max_position` positions.
    pub fn extended(&self, max_position: usize) -> Self {
        if max_position <= self.max_position {
            return self.clone();
        }
        let mut t = self.clone();
        t.fill_cache(max_position);
        t
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn max_position(&self) -> usize {
        self.max_position
    }

    /// `(cos, sin)` of `m * theta_i`; cached positions are exact copies of
    /// the on-the-fly values.
    #[inline]
    pub fn cos_sin(&self, m: usize, i: usize) -> (f64, f64) {
        if m < self.max_position {
            let k = m * (self.d / 2) + i;
            (self.cos[k], self.sin[k])
        } else {
            let angle = m as f64 * self.theta[i];
            (angle.cos(), angle.sin())
        }
    }
}

static SIGN_FAULT: AtomicBool = AtomicBool::new(false);

/// Mutation hook for the verification suite: when set, rotations at odd
/// positions use the wrong sine sign. Rotations stay orthogonal but scores
/// stop depending only on relative position.
#[doc(hidden)]
pub fn set_sign_fault(on: bool) {
    SIGN_FAULT.store(on, Ordering::SeqCst);
}

#[doc(hidden)]
pub fn sign_fault() -> bool {
    SIGN_FAULT.load(Ordering::Relaxed)
}

/// Rotates one `d`-vector in place by position `m`. `inverse` applies the
/// transpose rotation (angle `-m * theta`), used for gradients.
#[inline]
pub fn rotate_slice<F: Float>(x: &mut [F], m: usize, table: &FrequencyTable, inverse: bool) {
    debug_assert_eq!(x.len(), table.d);
    let flip = if sign_fault() && m % 2 == 1 { -1.0 } else { 1.0 };
    for i in 0..table.d / 2 {
        let (c, s) = table.cos_sin(m, i);
        let s = if inverse { -s } else { s } * flip;
        let (c, s) = (F::from(c).unwrap(), F::from(s).unwrap());
        let a = x[2 * i];
        let b = x[2 * i + 1];
        x[2 * i] = c * a - s * b;
        x[2 * i + 1] = s * a + c * b;
    }
}

fn check_dim(x: &Tensor, table: &FrequencyTable, op: &'static str) -> Result<()> {
    if x.last_dim() != table.d {
        return Err(Error::shape(op, format!("last dim {} vs rotary dim {}", x.last_dim(), table.d)));
    }
    Ok(())
}

/// Rotates every `d`-vector of `x` (last axis) by the same position `m`.
pub fn rotate(x: &Tensor, m: usize, table: &FrequencyTable) -> Result<Tensor> {
    check_dim(x, table, "rotate")?;
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(table.d) {
        rotate_slice(chunk, m, table, false);
    }
    Ok(out)
}

/// Role-tagged rotation; identical arithmetic for all four roles.
pub fn rotate_role(x: &Tensor, m: usize, _role: Role, table: &FrequencyTable) -> Result<Tensor> {
    rotate(x, m, table)
}

/// Rotates row `t` of a `[T×d]` matrix by position `start + t`.
pub fn rotate_sequence(x: &Tensor, start: usize, table: &FrequencyTable) -> Result<Tensor> {
    check_dim(x, table, "rotate_sequence")?;
    let mut out = x.clone();
    for (t, row) in out.data_mut().chunks_mut(table.d).enumerate() {
        rotate_slice(row, start + t, table, false);
    }
    Ok(out)
}

/// `<rotate(xq, m), rotate(xk, n)>`.
pub fn relative_score(xq: &Tensor, m: usize, xk: &Tensor, n: usize, table: &FrequencyTable) -> Result<f64> {
    if xq.len() != table.d || xk.len() != table.d {
        return Err(Error::shape(
            "relative_score",
            format!("vectors of length {} and {} vs rotary dim {}", xq.len(), xk.len(), table.d),
        ));
    }
    let q = rotate(xq, m, table)?;
    let k = rotate(xk, n, table)?;
    q.dot(&k)
}

/// `max(1, log_base(m + 1))`, the long-position multiplier for query-like
/// vectors. Positions whose one-based index is within `base` are unaffected.
pub fn log_position_scale(m: usize, base: u64) -> Result<f64> {
    if base < 2 {
        return Err(Error::invalid(format!("log-position base must be >= 2, got {base}")));
    }
    Ok(log_scale_unchecked(m, base))
}

#[inline]
pub(crate) fn log_scale_unchecked(m: usize, base: u64) -> f64 {
    let n = (m + 1) as u64;
    if n <= base {
        return 1.0;
    }
    // exact powers of the base give exact integers
    let mut p = base;
    let mut k = 1u32;
    while let Some(next) = p.checked_mul(base) {
        if next > n {
            break;
        }
        p = next;
        k += 1;
    }
    if p == n {
        return k as f64;
    }
    ((n as f64).ln() / (base as f64).ln()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn frequencies_small_dims() {
        assert_eq!(build_frequencies(2, 1e4).unwrap().theta(), &[1.0]);
        let t = build_frequencies(4, 1e4).unwrap();
        assert_eq!(t.theta()[0], 1.0);
        assert!((t.theta()[1] - 0.01).abs() < 1e-16);
        let t = build_frequencies(8, 1e4).unwrap();
        let expect = [1.0, 1e4f64.powf(-0.25), 1e4f64.powf(-0.5), 1e4f64.powf(-0.75)];
        for (a, b) in t.theta().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn frequencies_strictly_decreasing() {
        let t = build_frequencies(64, 1e4).unwrap();
        assert!(t.theta().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn frequencies_reject_bad_args() {
        assert!(build_frequencies(3, 1e4).is_err());
        assert!(build_frequencies(0, 1e4).is_err());
        assert!(build_frequencies(4, 0.0).is_err());
        assert!(build_frequencies(4, -2.0).is_err());
    }

    #[test]
    fn zero_position_is_identity() {
        let t = build_frequencies(8, 1e4).unwrap();
        let x = Rng::new(1).normal_tensor([8], 1.0);
        assert_eq!(rotate(&x, 0, &t).unwrap(), x);
    }

    #[test]
    fn unit_vector_traces_the_circle() {
        let t = build_frequencies(2, 1e4).unwrap();
        let r = rotate(&Tensor::vector(vec![1.0, 0.0]), 1, &t).unwrap();
        assert_eq!(r.data(), &[1f64.cos(), 1f64.sin()]);
        let r = rotate(&Tensor::vector(vec![1.0, 0.0]), 11, &t).unwrap();
        assert!((r.data()[0] - 11f64.cos()).abs() < 1e-15);
        assert!((r.data()[1] - 11f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn cached_and_uncached_agree_bitwise() {
        let a = FrequencyTable::new(16, 1e4).unwrap();
        let b = a.extended(64);
        let x = Rng::new(2).normal_tensor([16], 1.0);
        for m in [0, 1, 17, 63, 64, 1000] {
            assert_eq!(rotate(&x, m, &a).unwrap(), rotate(&x, m, &b).unwrap());
        }
    }

    #[test]
    fn dimension_mismatch() {
        let t = build_frequencies(4, 1e4).unwrap();
        assert!(rotate(&Tensor::zeros([6]), 1, &t).is_err());
        assert!(relative_score(&Tensor::zeros([4]), 0, &Tensor::zeros([2]), 0, &t).is_err());
    }

    #[test]
    fn relative_score_closed_form() {
        let t = build_frequencies(2, 1e4).unwrap();
        let e = Tensor::vector(vec![1.0, 0.0]);
        let s = relative_score(&e, 5, &e, 4, &t).unwrap();
        assert!((s - 1f64.cos()).abs() < 1e-12);
        assert!((s - 0.540302).abs() < 1e-6);
    }

    #[test]
    fn relative_score_same_position_is_dot() {
        let t = build_frequencies(8, 1e4).unwrap();
        let mut r = Rng::new(3);
        let q = r.normal_tensor([8], 1.0);
        let k = r.normal_tensor([8], 1.0);
        let s = relative_score(&q, 9, &k, 9, &t).unwrap();
        assert!((s - q.dot(&k).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn roles_share_one_code_path() {
        let t = build_frequencies(8, 1e4).unwrap();
        let x = Rng::new(4).normal_tensor([8], 1.0);
        let outs: Vec<_> = [Role::Query, Role::Key, Role::C, Role::B]
            .iter()
            .map(|&r| rotate_role(&x, 11, r, &t).unwrap())
            .collect();
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn log_scale_values() {
        assert_eq!(log_position_scale(0, 16).unwrap(), 1.0);
        assert_eq!(log_position_scale(15, 16).unwrap(), 1.0);
        assert_eq!(log_position_scale(255, 16).unwrap(), 2.0);
        assert_eq!(log_position_scale(99, 10).unwrap(), 2.0);
        assert_eq!(log_position_scale(999, 10).unwrap(), 3.0);
        let v = log_position_scale(31, 16).unwrap();
        assert!((v - 1.25).abs() < 1e-12);
        assert!(log_position_scale(5, 1).is_err());
    }
}
