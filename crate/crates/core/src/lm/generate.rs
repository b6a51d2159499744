//! Incremental decoding with per-layer caches.

use crate::autodiff::Tape;
use crate::blocks::{ParamTree, RopeTables};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::model::{model_forward, LmParams, ModelCache};

/// Cache footprint after one decoding step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheTrace {
    pub position: usize,
    pub ss_bytes: usize,
    pub sa_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// Prompt followed by the generated ids.
    pub ids: Vec<usize>,
    /// Next-token logits used for every generated id, in order.
    pub step_logits: Vec<Vec<f64>>,
    pub trace: Vec<CacheTrace>,
}

/// Stateful decoder holding bound parameters and caches for one sequence.
pub struct Decoder<'a> {
    params: &'a LmParams<Tensor>,
    cfg: &'a ModelConfig,
    tables: RopeTables,
    cache: ModelCache,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a LmParams<Tensor>, cfg: &'a ModelConfig) -> Result<Self> {
        Ok(Decoder { params, cfg, tables: RopeTables::new(cfg)?, cache: ModelCache::new(cfg) })
    }

    pub fn position(&self) -> usize {
        self.cache.position()
    }

    pub fn cache(&self) -> &ModelCache {
        &self.cache
    }

    /// Feeds `ids` at the current position; returns logits of the last one.
    pub fn feed(&mut self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let bound = self.params.map(&mut |t| tape.constant(t.clone()));
        let start = self.cache.position();
        let out = model_forward(&mut tape, &bound, self.cfg, &self.tables, ids, 1, start, Some(&mut self.cache))?;
        let lv = tape.value(out);
        Ok(lv.row(lv.rows() - 1).to_vec())
    }
}

fn sample(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature <= 0.0 {
        return logits.iter().enumerate().fold(0, |best, (i, &v)| if v > logits[best] { i } else { best });
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| ((v - mx) / temperature).exp()).collect();
    rng.categorical(&w)
}

/// Samples `n_new` ids after `prompt` (argmax at temperature 0). Only the
/// caches are consulted after the prompt has been fed once.
pub fn generate(
    params: &LmParams<Tensor>,
    cfg: &ModelConfig,
    prompt: &[usize],
    n_new: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Generation> {
    generate_streaming(params, cfg, prompt, n_new, temperature, rng, &mut |_, _| Ok(()))
}

/// As [`generate`], calling `on_token` with each new id and the cache
/// footprint it was sampled from.
pub fn generate_streaming(
    params: &LmParams<Tensor>,
    cfg: &ModelConfig,
    prompt: &[usize],
    n_new: usize,
    temperature: f64,
    rng: &mut Rng,
    on_token: &mut dyn FnMut(usize, CacheTrace) -> Result<()>,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must be non-empty"));
    }
    let mut ids = prompt.to_vec();
    let mut out = Generation { ids: vec![], step_logits: vec![], trace: vec![] };
    if n_new == 0 {
        out.ids = ids;
        return Ok(out);
    }
    if prompt.len() + n_new > cfg.max_position + 1 {
        return Err(Error::Overlong { len: prompt.len() + n_new, max: cfg.max_position });
    }
    let mut dec = Decoder::new(params, cfg)?;
    let mut logits = dec.feed(prompt)?;
    for i in 0..n_new {
        let next = sample(&logits, temperature, rng);
        let (ss_bytes, sa_bytes) = dec.cache().sizes();
        let trace = CacheTrace { position: dec.position(), ss_bytes, sa_bytes };
        out.trace.push(trace);
        out.step_logits.push(logits);
        ids.push(next);
        on_token(next, trace)?;
        if i + 1 < n_new {
            logits = dec.feed(&[next])?;
        } else {
            logits = vec![];
        }
    }
    out.ids = ids;
    Ok(out)
}
