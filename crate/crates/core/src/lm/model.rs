//! Causal language model: embedding, hybrid modules, final norm, head.

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::blocks::{
    hybrid_module_forward, module_pattern, HybridModuleParams, LayerCache, ParamTree, RopeTables, SeqCtx,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams<T> {
    /// `[vocab × d_model]`
    pub embed: T,
    pub modules: Vec<HybridModuleParams<T>>,
    pub final_norm: T,
    /// `[d_model × vocab]`
    pub head: T,
}

impl<T> ParamTree<T> for LmParams<T> {
    type Mapped<U> = LmParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        f(p("embed"), &self.embed);
        for (i, m) in self.modules.iter().enumerate() {
            m.visit(&p(&format!("modules.{i}")), f);
        }
        f(p("final_norm"), &self.final_norm);
        f(p("head"), &self.head);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        f(p("embed"), &mut self.embed);
        for (i, m) in self.modules.iter_mut().enumerate() {
            m.visit_mut(&p(&format!("modules.{i}")), f);
        }
        f(p("final_norm"), &mut self.final_norm);
        f(p("head"), &mut self.head);
    }

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LmParams<U> {
        LmParams {
            embed: f(&self.embed),
            modules: self.modules.iter().map(|m| m.map(f)).collect(),
            final_norm: f(&self.final_norm),
            head: f(&self.head),
        }
    }
}

impl LmParams<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let embed = rng.normal_tensor([v, d], cfg.init_std);
        let modules = (0..cfg.n_modules).map(|_| HybridModuleParams::init(cfg, rng)).collect();
        let head = rng.normal_tensor([d, v], cfg.init_std);
        Ok(LmParams { embed, modules, final_norm: Tensor::ones([d]), head })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    pub fn to_named(&self) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        self.visit("", &mut |name, t| {
            out.insert(name, t.clone());
        });
        out
    }

    /// Rebuilds parameters from named tensors; names and shapes must match
    /// the layout implied by `cfg` exactly.
    pub fn from_named(cfg: &ModelConfig, mut named: IndexMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::skeleton(cfg);
        let mut err = None;
        params.visit_mut("", &mut |name, slot| {
            if err.is_some() {
                return;
            }
            match named.swap_remove(&name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => {
                    err = Some(format!("tensor {name} has shape {:?}, config implies {:?}", t.shape(), slot.shape()))
                }
                None => err = Some(format!("missing tensor {name}")),
            }
        });
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }

    /// Zero-filled parameters with the right shapes.
    fn skeleton(cfg: &ModelConfig) -> Self {
        let mut cfg = cfg.clone();
        cfg.init_std = 0.0;
        Self::init(&cfg, &mut Rng::new(0)).expect("validated config")
    }
}

/// Per-module, per-sub-layer caches for incremental decoding of one sequence.
#[derive(Clone, Debug)]
pub struct ModelCache {
    pub modules: Vec<Vec<LayerCache>>,
}

impl ModelCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let layer = || module_pattern(cfg).into_iter().map(LayerCache::for_kind).collect();
        ModelCache { modules: (0..cfg.n_modules).map(|_| layer()).collect() }
    }

    pub fn position(&self) -> usize {
        self.modules.first().and_then(|m| m.first()).map_or(0, LayerCache::position)
    }

    /// Total bytes held by SSD states and by attention key/value caches.
    pub fn sizes(&self) -> (usize, usize) {
        let (mut ss, mut sa) = (0, 0);
        for c in self.modules.iter().flatten() {
            match c {
                LayerCache::Ss(_) => ss += c.size_bytes(),
                LayerCache::Sa(_) => sa += c.size_bytes(),
            }
        }
        (ss, sa)
    }
}

/// Runs the model on `batch` sequences of `seq_len` ids (row-major) that
/// start at absolute position `start`. Returns logits `[batch·seq_len × vocab]`.
#[allow(clippy::too_many_arguments)]
pub fn model_forward(
    tape: &mut Tape,
    params: &LmParams<Var>,
    cfg: &ModelConfig,
    tables: &RopeTables,
    ids: &[usize],
    batch: usize,
    start: usize,
    mut cache: Option<&mut ModelCache>,
) -> Result<Var> {
    if batch == 0 || !ids.len().is_multiple_of(batch) || ids.is_empty() {
        return Err(Error::shape("model_forward", format!("{} ids do not split into {batch} sequences", ids.len())));
    }
    let seq_len = ids.len() / batch;
    if start + seq_len > cfg.max_position {
        return Err(Error::Overlong { len: start + seq_len, max: cfg.max_position });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let ctx = SeqCtx { cfg, tables, batch, seq_len, start };
    let mut x = tape.embedding(params.embed, ids)?;
    for (i, m) in params.modules.iter().enumerate() {
        let c = cache.as_deref_mut().map(|c| c.modules[i].as_mut_slice());
        x = hybrid_module_forward(tape, x, m, &ctx, c)?;
    }
    let h = tape.rmsnorm(x, params.final_norm, cfg.rms_eps)?;
    tape.matmul(h, params.head)
}

/// Forward-only logits for a single sequence.
pub fn logits(params: &LmParams<Tensor>, cfg: &ModelConfig, ids: &[usize]) -> Result<Tensor> {
    let tables = RopeTables::new(cfg)?;
    let mut tape = Tape::inference();
    let bound = params.map(&mut |t| tape.constant(t.clone()));
    let out = model_forward(&mut tape, &bound, cfg, &tables, ids, 1, 0, None)?;
    Ok(tape.value(out).clone())
}

/// Masked mean cross-entropy of a batch on a fresh tape; the loss value and
/// the bound parameters are returned for backward.
pub fn batch_loss(
    tape: &mut Tape,
    params: &LmParams<Tensor>,
    cfg: &ModelConfig,
    tables: &RopeTables,
    inputs: &[usize],
    targets: &[usize],
    mask: &[bool],
    batch: usize,
) -> Result<(Var, LmParams<Var>)> {
    let bound = params.map(&mut |t| tape.param(t.clone()));
    let logits = model_forward(tape, &bound, cfg, tables, inputs, batch, 0, None)?;
    let loss = tape.cross_entropy(logits, targets, mask)?;
    Ok((loss, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tokenizer::VOCAB_SIZE;

    fn small() -> ModelConfig {
        ModelConfig { d_model: 16, n_modules: 1, n_heads: 2, d_state: 4, chunk_len: 4, max_position: 64, ..ModelConfig::micro() }
    }

    #[test]
    fn logits_shape() {
        let cfg = small();
        let p = LmParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let l = logits(&p, &cfg, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(l.shape(), &[5, VOCAB_SIZE]);
    }

    #[test]
    fn overlong_and_bad_ids() {
        let cfg = small();
        let p = LmParams::init(&cfg, &mut Rng::new(1)).unwrap();
        assert!(matches!(logits(&p, &cfg, &vec![1; 65]), Err(Error::Overlong { len: 65, max: 64 })));
        assert!(logits(&p, &cfg, &[VOCAB_SIZE]).is_err());
        assert!(logits(&p, &cfg, &[]).is_err());
    }

    #[test]
    fn named_round_trip() {
        let cfg = small();
        let p = LmParams::init(&cfg, &mut Rng::new(2)).unwrap();
        let named = p.to_named();
        assert_eq!(named.len(), p.names().len());
        assert_eq!(LmParams::from_named(&cfg, named.clone()).unwrap(), p);
        let mut missing = named.clone();
        missing.shift_remove("head");
        assert!(LmParams::from_named(&cfg, missing).is_err());
        let mut extra = named.clone();
        extra.insert("bogus".into(), Tensor::scalar(1.0));
        assert!(LmParams::from_named(&cfg, extra).is_err());
        let mut other = cfg.clone();
        other.d_state = 8;
        assert!(LmParams::from_named(&other, named).is_err());
    }

    #[test]
    fn untrained_loss_near_ln_vocab() {
        let cfg = small();
        let p = LmParams::init(&cfg, &mut Rng::new(3)).unwrap();
        let tables = RopeTables::new(&cfg).unwrap();
        let mut rng = Rng::new(4);
        let ids: Vec<usize> = (0..33).map(|_| rng.below(VOCAB_SIZE)).collect();
        let mut tape = Tape::inference();
        let (loss, _) = batch_loss(&mut tape, &p, &cfg, &tables, &ids[..32], &ids[1..], &[true; 32], 1).unwrap();
        let l = tape.value(loss).item();
        let want = (VOCAB_SIZE as f64).ln();
        assert!((l - want).abs() / want < 0.05, "{l} vs {want}");
    }
}
