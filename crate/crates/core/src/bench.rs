//! Throughput measurements of the sequence mixers and the full model.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_kernel, attention_multihead_backward, AttnLayout, Normalize};
use crate::autodiff::Tape;
use crate::blocks::{ParamTree, RopeTables};
use crate::config::{BenchConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::lm::{model_forward, LmParams};
use crate::rng::Rng;
use crate::ssd::{chunked_scan, recurrent_scan, ssd_multihead_backward, HeadView, SsdLayout};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    AttentionFull,
    SsdRecurrent,
    SsdChunked,
    Hybrid,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] =
        [BenchMode::AttentionFull, BenchMode::SsdRecurrent, BenchMode::SsdChunked, BenchMode::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::AttentionFull => "attention-full",
            BenchMode::SsdRecurrent => "ssd-recurrent",
            BenchMode::SsdChunked => "ssd-chunked",
            BenchMode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mode: BenchMode,
    #[serde(rename = "T")]
    pub t: usize,
    pub batch: usize,
    /// Median wall time of one iteration, seconds.
    pub median_secs: f64,
    pub tokens_per_sec: f64,
    pub fp_mode: Precision,
    pub backward: bool,
    pub iters: usize,
    pub workers: usize,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str = "mode,T,batch,median_secs,tokens_per_sec,fp_mode,backward,iters,workers";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.3},{},{},{},{}",
            self.mode, self.t, self.batch, self.median_secs, self.tokens_per_sec, self.fp_mode, self.backward, self.iters, self.workers
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub mode: BenchMode,
    /// Least-squares slope of `ln(time)` against `ln(T)`.
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub slopes: Vec<SlopeFit>,
}

impl BenchReport {
    pub fn slope(&self, mode: BenchMode) -> Option<f64> {
        self.slopes.iter().find(|s| s.mode == mode).map(|s| s.slope)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(BenchRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Least-squares slope through `(ln x, ln y)`; `None` below two points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rough peak working set of one iteration, in bytes.
pub fn estimate_bytes(mode: BenchMode, cfg: &ModelConfig, t: usize, batch: usize, backward: bool) -> u64 {
    let (t, b) = (t as u64, batch as u64);
    let (d, h, n) = (cfg.d_model as u64, cfg.n_heads as u64, cfg.d_state as u64);
    let inputs = 8 * b * t * (2 * d + 2 * h * n + h);
    match mode {
        BenchMode::AttentionFull => {
            let scores = if backward { 8 * b * h * t * t } else { 8 * t };
            inputs + scores
        }
        BenchMode::SsdRecurrent | BenchMode::SsdChunked => inputs + 8 * (d * n + t * d),
        BenchMode::Hybrid => {
            // every activation stays on the tape
            let per_layer = 8 * b * t * (12 * d + 4 * h * n);
            let attn = if backward { 8 * b * h * t * t } else { 8 * t };
            per_layer * cfg.n_layers() as u64 + attn * (cfg.n_modules * cfg.sa_per_module) as u64
        }
    }
}

/// Random inputs shared by the kernel modes, laid out per (batch, head).
struct KernelInputs<F> {
    heads: Vec<HeadInputs<F>>,
}

struct HeadInputs<F> {
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    a: Vec<F>,
}

fn make_inputs<F: Float>(cfg: &ModelConfig, t: usize, batch: usize, rng: &mut Rng) -> KernelInputs<F> {
    let (n, p) = (cfg.d_state, cfg.head_dim());
    let mut vec = |len: usize, lo: f64, hi: f64| -> Vec<F> {
        (0..len).map(|_| F::from(rng.uniform_range(lo, hi)).unwrap()).collect()
    };
    let heads = (0..batch * cfg.n_heads)
        .map(|_| {
            // q/k double as C/B, so their width is the state size for SSD
            let w = n.max(p);
            HeadInputs { q: vec(t * w, -0.5, 0.5), k: vec(t * w, -0.5, 0.5), v: vec(t * p, -1.0, 1.0), a: vec(t, 0.8, 1.0) }
        })
        .collect();
    KernelInputs { heads }
}

fn run_kernel<F: Float + Send + Sync>(
    mode: BenchMode,
    cfg: &ModelConfig,
    t: usize,
    inp: &KernelInputs<F>,
    workers: usize,
) {
    let (n, p) = (cfg.d_state, cfg.head_dim());
    let w = n.max(p);
    let one = |hi: &HeadInputs<F>| {
        let mut y = vec![F::zero(); t * p];
        match mode {
            BenchMode::AttentionFull => {
                attention_kernel(&hi.q, &hi.k, &hi.v, t, t, w, p, Normalize::Softmax, &mut y, None);
            }
            BenchMode::SsdRecurrent | BenchMode::SsdChunked => {
                let (c, b): (Vec<F>, Vec<F>) = if w == n {
                    (hi.q.clone(), hi.k.clone())
                } else {
                    let take = |x: &[F]| x.chunks(w).flat_map(|r| r[..n].to_vec()).collect();
                    (take(&hi.q), take(&hi.k))
                };
                let view = HeadView { a: &hi.a, b: &b, c: &c, x: &hi.v, t, n, p };
                let mut h = vec![F::zero(); n * p];
                if mode == BenchMode::SsdRecurrent {
                    recurrent_scan(&view, &mut h, &mut y);
                } else {
                    chunked_scan(&view, cfg.chunk_len, &mut h, &mut y);
                }
            }
            BenchMode::Hybrid => unreachable!("hybrid runs through the model"),
        }
        std::hint::black_box(y);
    };
    if workers <= 1 {
        inp.heads.iter().for_each(one);
    } else {
        let per = inp.heads.len().div_ceil(workers);
        std::thread::scope(|s| {
            for chunk in inp.heads.chunks(per.max(1)) {
                s.spawn(move || chunk.iter().for_each(one));
            }
        });
    }
}

/// Backward passes of the fp64 kernels on flat batched inputs.
fn run_kernel_backward(mode: BenchMode, cfg: &ModelConfig, t: usize, batch: usize, rng: &mut Rng) -> Result<()> {
    let (h, n, p) = (cfg.n_heads, cfg.d_state, cfg.head_dim());
    let rows = batch * t;
    match mode {
        BenchMode::AttentionFull => {
            let l = AttnLayout { batch, tq: t, tk: t, heads: h, head_dim: p, value_dim: p };
            let q = rng.uniform_tensor([rows, h * p], -0.5, 0.5);
            let k = rng.uniform_tensor([rows, h * p], -0.5, 0.5);
            let v = rng.uniform_tensor([rows, h * p], -1.0, 1.0);
            let (_, w) = crate::attention::attention_multihead_forward(&q, &k, &v, l, Normalize::Softmax, true)?;
            let dy = Tensor::ones([rows, h * p]);
            std::hint::black_box(attention_multihead_backward(&q, &k, &v, l, Normalize::Softmax, &w, &dy)?);
        }
        _ => {
            let l = SsdLayout { batch, seq_len: t, heads: h, state_dim: n, head_dim: p };
            let a = rng.uniform_tensor([rows, h], 0.8, 1.0);
            let b = rng.uniform_tensor([rows, h * n], -0.5, 0.5);
            let c = rng.uniform_tensor([rows, h * n], -0.5, 0.5);
            let x = rng.uniform_tensor([rows, h * p], -1.0, 1.0);
            crate::ssd::ssd_multihead_forward(&a, &b, &c, &x, l, cfg.chunk_len, None)?;
            let dy = Tensor::ones([rows, h * p]);
            std::hint::black_box(ssd_multihead_backward(&a, &b, &c, &x, l, None, &dy)?);
        }
    }
    Ok(())
}

fn run_hybrid(params: &LmParams<Tensor>, cfg: &ModelConfig, ids: &[usize], batch: usize, backward: bool) -> Result<()> {
    let tables = RopeTables::new(cfg)?;
    let mut tape = if backward { Tape::new() } else { Tape::inference() };
    let bound = params.map(&mut |t| if backward { tape.param(t.clone()) } else { tape.constant(t.clone()) });
    let out = model_forward(&mut tape, &bound, cfg, &tables, ids, batch, 0, None)?;
    if backward {
        let loss = tape.mean(out);
        std::hint::black_box(tape.backward(loss)?);
    }
    Ok(())
}

/// Times every requested mode at every length. Lengths must be ascending.
pub fn run_bench(bc: &BenchConfig, cfg: &ModelConfig, precision: Precision, seed: u64) -> Result<BenchReport> {
    let modes = bc.modes.iter().map(|m| m.parse()).collect::<Result<Vec<BenchMode>>>()?;
    if bc.lengths.is_empty() || bc.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bench lengths must be non-empty and strictly ascending".into()));
    }
    if bc.iters < 5 || bc.warmup < 2 {
        return Err(Error::Config("bench needs at least 2 warmups and 5 timed iterations".into()));
    }
    if bc.batch == 0 {
        return Err(Error::Config("bench batch must be >= 1".into()));
    }
    cfg.validate()?;
    let max_t = *bc.lengths.last().unwrap();
    let mut cfg = cfg.clone();
    cfg.max_position = cfg.max_position.max(max_t);
    for &mode in &modes {
        let est = estimate_bytes(mode, &cfg, max_t, bc.batch, bc.backward);
        if est > bc.max_bytes {
            return Err(Error::Config(format!(
                "{mode} at T = {max_t} needs about {:.2} GiB, limit is {:.2} GiB",
                est as f64 / (1u64 << 30) as f64,
                bc.max_bytes as f64 / (1u64 << 30) as f64
            )));
        }
    }
    let mut rng = Rng::new(seed);
    let params = LmParams::init(&cfg, &mut rng.fork(7))?;
    let mut records = Vec::new();
    for &mode in &modes {
        for &t in &bc.lengths {
            let fp = if mode == BenchMode::Hybrid || bc.backward { Precision::F64 } else { precision };
            let mut iter: Box<dyn FnMut() -> Result<()>> = if mode == BenchMode::Hybrid {
                let ids: Vec<usize> = (0..bc.batch * t).map(|_| rng.below(cfg.vocab_size)).collect();
                let (params, cfg, backward, batch) = (&params, &cfg, bc.backward, bc.batch);
                Box::new(move || run_hybrid(params, cfg, &ids, batch, backward))
            } else if bc.backward {
                let mut r = rng.fork(t as u64);
                let (cfg, batch) = (&cfg, bc.batch);
                Box::new(move || run_kernel_backward(mode, cfg, t, batch, &mut r))
            } else if fp == Precision::F32 {
                let inp = make_inputs::<f32>(&cfg, t, bc.batch, &mut rng);
                let (cfg, workers) = (&cfg, bc.workers);
                Box::new(move || {
                    run_kernel(mode, cfg, t, &inp, workers);
                    Ok(())
                })
            } else {
                let inp = make_inputs::<f64>(&cfg, t, bc.batch, &mut rng);
                let (cfg, workers) = (&cfg, bc.workers);
                Box::new(move || {
                    run_kernel(mode, cfg, t, &inp, workers);
                    Ok(())
                })
            };
            for _ in 0..bc.warmup {
                iter()?;
            }
            let mut times = Vec::with_capacity(bc.iters);
            for _ in 0..bc.iters {
                let start = Instant::now();
                iter()?;
                times.push(start.elapsed().as_secs_f64());
            }
            let med = median(&mut times);
            records.push(BenchRecord {
                mode,
                t,
                batch: bc.batch,
                median_secs: med,
                tokens_per_sec: (bc.batch * t) as f64 / med.max(1e-12),
                fp_mode: fp,
                backward: bc.backward,
                iters: bc.iters,
                workers: if mode == BenchMode::Hybrid || bc.backward { 1 } else { bc.workers.max(1) },
            });
        }
    }
    let slopes = modes
        .iter()
        .filter_map(|&mode| {
            let pts: Vec<(f64, f64)> =
                records.iter().filter(|r| r.mode == mode).map(|r| (r.t as f64, r.median_secs)).collect();
            loglog_slope(&pts).map(|slope| SlopeFit { mode, slope })
        })
        .collect();
    Ok(BenchReport { records, slopes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let lin: Vec<_> = [1.0, 2.0, 4.0].iter().map(|&x| (x, 3.0 * x)).collect();
        assert!((loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-12);
        let quad: Vec<_> = [10.0, 20.0, 40.0].iter().map(|&x| (x, x * x)).collect();
        assert!((loglog_slope(&quad).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&[(1.0, 1.0)]).is_none());
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in BenchMode::ALL {
            assert_eq!(m.name().parse::<BenchMode>().unwrap(), m);
        }
        assert!("ssd".parse::<BenchMode>().is_err());
    }

    fn small_bench(lengths: Vec<usize>) -> BenchConfig {
        BenchConfig { lengths, ..BenchConfig::default() }
    }

    #[test]
    fn single_length_has_no_slope() {
        let cfg = ModelConfig { n_modules: 1, ..ModelConfig::micro() };
        let rep = run_bench(&small_bench(vec![32]), &cfg, Precision::F64, 1).unwrap();
        assert_eq!(rep.records.len(), 4);
        assert!(rep.slopes.is_empty());
        assert_eq!(rep.to_csv().lines().count(), 5);
    }

    #[test]
    fn bad_lengths_and_oversize_rejected() {
        let cfg = ModelConfig::micro();
        assert!(run_bench(&small_bench(vec![64, 32]), &cfg, Precision::F64, 1).is_err());
        let mut bc = small_bench(vec![1 << 20]);
        bc.backward = true;
        bc.max_bytes = 1 << 30;
        let err = run_bench(&bc, &cfg, Precision::F64, 1).unwrap_err();
        assert!(err.to_string().contains("GiB"), "{err}");
    }

    #[test]
    fn fp32_kernels_and_workers() {
        let cfg = ModelConfig { n_modules: 1, ..ModelConfig::micro() };
        let mut bc = small_bench(vec![16, 32]);
        bc.workers = 2;
        bc.modes = vec!["ssd-chunked".into(), "hybrid".into()];
        let rep = run_bench(&bc, &cfg, Precision::F32, 1).unwrap();
        assert_eq!(rep.records[0].fp_mode, Precision::F32);
        assert_eq!(rep.records[0].workers, 2);
        assert_eq!(rep.records[2].fp_mode, Precision::F64);
        assert!(rep.slope(BenchMode::SsdChunked).is_some());
    }
}
