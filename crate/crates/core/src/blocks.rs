//! Hybrid building blocks: RMSNorm, feed-forward, the SSD sub-layer, the
//! attention sub-layer, and the module that stacks them.
//!
//! Every sub-layer is pre-norm with a residual around it, and each one is
//! followed by its own pre-norm FFN with a second residual:
//!
//! ```text
//! x = x + mixer(rmsnorm(x))
//! x = x + ffn(rmsnorm(x))
//! ```
//!
//! Parameter structs are generic over the leaf type so the same layout holds
//! stored tensors (`T = Tensor`) and tape handles (`T = Var`).

use std::sync::Arc;

use crate::attention::{AttnLayout, Normalize};
use crate::autodiff::{RopeSpec, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::rope::FrequencyTable;
use crate::ssd::SsdLayout;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    /// `[d_model × hidden]`
    pub w1: T,
    /// `[hidden × d_model]`
    pub w2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsBlockParams<T> {
    pub norm: T,
    pub w_x: T,
    pub w_b: T,
    pub w_c: T,
    /// `[d_model × heads]` decay logits, one per head.
    pub w_a: T,
    pub b_a: T,
    pub w_o: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaBlockParams<T> {
    pub norm: T,
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer<T> {
    Ss(SsBlockParams<T>),
    Sa(SaBlockParams<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Ss,
    Sa,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubLayer<T> {
    pub mixer: Mixer<T>,
    pub ffn_norm: T,
    pub ffn: FfnParams<T>,
}

impl<T> SubLayer<T> {
    pub fn kind(&self) -> LayerKind {
        match self.mixer {
            Mixer::Ss(_) => LayerKind::Ss,
            Mixer::Sa(_) => LayerKind::Sa,
        }
    }
}

/// One hybrid module: `ss_per_module` SSD sub-layers then `sa_per_module`
/// attention sub-layers, each with its FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridModuleParams<T> {
    layers: Vec<SubLayer<T>>,
}

/// Layer-kind sequence a module must have under `cfg`.
pub fn module_pattern(cfg: &ModelConfig) -> Vec<LayerKind> {
    let mut p = vec![LayerKind::Ss; cfg.ss_per_module];
    p.extend(std::iter::repeat_n(LayerKind::Sa, cfg.sa_per_module));
    p
}

impl<T> HybridModuleParams<T> {
    /// Rejects layer lists whose kinds differ from [`module_pattern`].
    pub fn new(layers: Vec<SubLayer<T>>, cfg: &ModelConfig) -> Result<Self> {
        let got: Vec<LayerKind> = layers.iter().map(SubLayer::kind).collect();
        let want = module_pattern(cfg);
        if got != want {
            return Err(Error::Config(format!("module layer pattern {got:?} does not match {want:?}")));
        }
        Ok(HybridModuleParams { layers })
    }

    pub fn layers(&self) -> &[SubLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [SubLayer<T>] {
        &mut self.layers
    }

    pub fn pattern(&self) -> Vec<LayerKind> {
        self.layers.iter().map(SubLayer::kind).collect()
    }
}

/// Visiting and mapping named leaves.
pub trait ParamTree<T> {
    type Mapped<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T));
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U>;

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _| out.push(n));
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! leaf_struct {
    ($ty:ident { $($field:ident),* }) => {
        impl<T> ParamTree<T> for $ty<T> {
            type Mapped<U> = $ty<U>;

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $( f(join(prefix, stringify!($field)), &self.$field); )*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $( f(join(prefix, stringify!($field)), &mut self.$field); )*
            }

            fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $ty<U> {
                $ty { $( $field: f(&self.$field), )* }
            }
        }
    };
}

leaf_struct!(FfnParams { w1, w2 });
leaf_struct!(SsBlockParams { norm, w_x, w_b, w_c, w_a, b_a, w_o });
leaf_struct!(SaBlockParams { norm, w_q, w_k, w_v, w_o });

impl<T> ParamTree<T> for SubLayer<T> {
    type Mapped<U> = SubLayer<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        match &self.mixer {
            Mixer::Ss(p) => p.visit(&join(prefix, "ss"), f),
            Mixer::Sa(p) => p.visit(&join(prefix, "sa"), f),
        }
        f(join(prefix, "ffn_norm"), &self.ffn_norm);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        match &mut self.mixer {
            Mixer::Ss(p) => p.visit_mut(&join(prefix, "ss"), f),
            Mixer::Sa(p) => p.visit_mut(&join(prefix, "sa"), f),
        }
        f(join(prefix, "ffn_norm"), &mut self.ffn_norm);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> SubLayer<U> {
        let mixer = match &self.mixer {
            Mixer::Ss(p) => Mixer::Ss(p.map(f)),
            Mixer::Sa(p) => Mixer::Sa(p.map(f)),
        };
        SubLayer { mixer, ffn_norm: f(&self.ffn_norm), ffn: self.ffn.map(f) }
    }
}

impl<T> ParamTree<T> for HybridModuleParams<T> {
    type Mapped<U> = HybridModuleParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> HybridModuleParams<U> {
        HybridModuleParams { layers: self.layers.iter().map(|l| l.map(f)).collect() }
    }
}

/// Binds every leaf of a stored parameter tree to a fresh tape leaf.
pub fn bind<P>(tape: &mut Tape, params: &P) -> P::Mapped<Var>
where
    P: ParamTree<Tensor>,
{
    params.map(&mut |t| tape.param(t.clone()))
}

// ---------------------------------------------------------------- init

struct Init<'a> {
    rng: &'a mut Rng,
    std: f64,
    out_std: f64,
}

impl Init<'_> {
    fn w(&mut self, rows: usize, cols: usize) -> Tensor {
        self.rng.normal_tensor([rows, cols], self.std)
    }

    fn out(&mut self, rows: usize, cols: usize) -> Tensor {
        self.rng.normal_tensor([rows, cols], self.out_std)
    }
}

impl HybridModuleParams<Tensor> {
    /// Scaled-normal init; output projections use `std / sqrt(2 · n_layers)`.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let h = cfg.n_heads;
        let hidden = cfg.ffn_mult * d;
        let mut init = Init {
            std: cfg.init_std,
            out_std: cfg.init_std / (2.0 * cfg.n_layers() as f64).sqrt(),
            rng,
        };
        let layers = module_pattern(cfg)
            .into_iter()
            .map(|kind| {
                let mixer = match kind {
                    LayerKind::Ss => Mixer::Ss(SsBlockParams {
                        norm: Tensor::ones([d]),
                        w_x: init.w(d, d),
                        w_b: init.w(d, h * cfg.d_state),
                        w_c: init.w(d, h * cfg.d_state),
                        w_a: init.w(d, h),
                        b_a: Tensor::full([h], cfg.decay_bias_init),
                        w_o: init.out(d, d),
                    }),
                    LayerKind::Sa => Mixer::Sa(SaBlockParams {
                        norm: Tensor::ones([d]),
                        w_q: init.w(d, d),
                        w_k: init.w(d, d),
                        w_v: init.w(d, d),
                        w_o: init.out(d, d),
                    }),
                };
                SubLayer {
                    mixer,
                    ffn_norm: Tensor::ones([d]),
                    ffn: FfnParams { w1: init.w(d, hidden), w2: init.out(hidden, d) },
                }
            })
            .collect();
        HybridModuleParams { layers }
    }

    /// Sets every output projection (mixer `w_o` and FFN `w2`) to zero.
    pub fn zero_output_projections(&mut self) {
        for l in &mut self.layers {
            zero_outputs(l);
        }
    }
}

pub fn zero_outputs(l: &mut SubLayer<Tensor>) {
    match &mut l.mixer {
        Mixer::Ss(p) => p.w_o = Tensor::zeros(p.w_o.shape().to_vec()),
        Mixer::Sa(p) => p.w_o = Tensor::zeros(p.w_o.shape().to_vec()),
    }
    l.ffn.w2 = Tensor::zeros(l.ffn.w2.shape().to_vec());
}

// ---------------------------------------------------------------- forward

/// Rotary tables for the two sub-layer kinds (their rotary dims differ in
/// general: attention rotates per-head channels, SSD rotates the state).
#[derive(Clone, Debug)]
pub struct RopeTables {
    pub sa: Arc<FrequencyTable>,
    pub ss: Arc<FrequencyTable>,
}

impl RopeTables {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let cache = cfg.max_position;
        let sa = Arc::new(FrequencyTable::with_max_position(cfg.head_dim(), cfg.rope_base, cache)?);
        let ss = if cfg.d_state == cfg.head_dim() {
            sa.clone()
        } else {
            Arc::new(FrequencyTable::with_max_position(cfg.d_state, cfg.rope_base, cache)?)
        };
        Ok(RopeTables { sa, ss })
    }
}

/// Shape and position of the rows flowing through a forward call.
#[derive(Clone, Copy, Debug)]
pub struct SeqCtx<'a> {
    pub cfg: &'a ModelConfig,
    pub tables: &'a RopeTables,
    pub batch: usize,
    pub seq_len: usize,
    /// Absolute position of each sequence's first row.
    pub start: usize,
}

/// Recurrent state of one SSD sub-layer: one `N×P` matrix per
/// (batch, head). Its size never depends on how many tokens were consumed.
#[derive(Clone, Debug)]
pub struct SsCache {
    pub position: usize,
    pub states: Vec<Vec<f64>>,
}

/// Rotated keys and values of one attention sub-layer (single sequence).
#[derive(Clone, Debug)]
pub struct KvCache {
    pub position: usize,
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub enum LayerCache {
    Ss(SsCache),
    Sa(KvCache),
}

impl LayerCache {
    pub fn for_kind(kind: LayerKind) -> Self {
        match kind {
            LayerKind::Ss => LayerCache::Ss(SsCache { position: 0, states: vec![] }),
            LayerKind::Sa => LayerCache::Sa(KvCache { position: 0, k: None, v: None }),
        }
    }

    pub fn position(&self) -> usize {
        match self {
            LayerCache::Ss(c) => c.position,
            LayerCache::Sa(c) => c.position,
        }
    }

    pub fn size_bytes(&self) -> usize {
        match self {
            LayerCache::Ss(c) => c.states.iter().map(|s| s.len() * 8).sum(),
            LayerCache::Sa(c) => {
                c.k.as_ref().map_or(0, Tensor::size_bytes) + c.v.as_ref().map_or(0, Tensor::size_bytes)
            }
        }
    }
}

pub fn rmsnorm(tape: &mut Tape, x: Var, gain: Var, eps: f64) -> Result<Var> {
    tape.rmsnorm(x, gain, eps)
}

/// Plain-tensor RMSNorm: `x / sqrt(mean(x²) + eps) * gain` over the last axis.
pub fn rmsnorm_tensor(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let gv = tape.constant(gain.clone());
    let y = tape.rmsnorm(xv, gv, eps)?;
    Ok(tape.value(y).clone())
}

/// `w2 · silu(w1 · x)`, no residual.
pub fn ffn_forward(tape: &mut Tape, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.silu(h);
    tape.matmul(h, p.w2)
}

fn check_cache_pos(position: usize, ctx: &SeqCtx<'_>) -> Result<()> {
    if position != ctx.start {
        return Err(Error::CachePosition { cache: position, input: ctx.start });
    }
    Ok(())
}

/// SSD sub-layer with pre-norm and residual.
pub fn ss_block_forward(
    tape: &mut Tape,
    x: Var,
    p: &SsBlockParams<Var>,
    ctx: &SeqCtx<'_>,
    cache: Option<&mut SsCache>,
) -> Result<Var> {
    let cfg = ctx.cfg;
    let h = tape.rmsnorm(x, p.norm, cfg.rms_eps)?;
    let logits = tape.matmul(h, p.w_a)?;
    let logits = tape.add_bias(logits, p.b_a)?;
    let a = tape.sigmoid(logits);
    let mut b = tape.matmul(h, p.w_b)?;
    let mut c = tape.matmul(h, p.w_c)?;
    let xs = tape.matmul(h, p.w_x)?;
    if cfg.use_rope_on_ssd {
        let spec = |scale: Option<u64>| RopeSpec {
            table: ctx.tables.ss.clone(),
            head_dim: cfg.d_state,
            seq_len: ctx.seq_len,
            start: ctx.start,
            log_scale_base: scale,
        };
        b = tape.rope(b, spec(None))?;
        c = tape.rope(c, spec(cfg.long_position_scaling.then_some(cfg.log_scale_base)))?;
    }
    let layout = SsdLayout {
        batch: ctx.batch,
        seq_len: ctx.seq_len,
        heads: cfg.n_heads,
        state_dim: cfg.d_state,
        head_dim: cfg.head_dim(),
    };
    let init = match &cache {
        Some(c) => {
            check_cache_pos(c.position, ctx)?;
            (!c.states.is_empty()).then(|| c.states.clone())
        }
        None => None,
    };
    let (y, finals) = tape.ssd(a, b, c, xs, layout, cfg.chunk_len, init)?;
    if let Some(cache) = cache {
        cache.states = finals;
        cache.position += ctx.seq_len;
    }
    let out = tape.matmul(y, p.w_o)?;
    tape.add(x, out)
}

/// Attention sub-layer (softmax, rotary Q/K) with pre-norm and residual.
///
/// With a cache, only the new rows are projected; their rotated keys and
/// values are appended and the queries attend over the whole prefix.
pub fn sa_block_forward(
    tape: &mut Tape,
    x: Var,
    p: &SaBlockParams<Var>,
    ctx: &SeqCtx<'_>,
    cache: Option<&mut KvCache>,
) -> Result<Var> {
    let cfg = ctx.cfg;
    let dh = cfg.head_dim();
    let h = tape.rmsnorm(x, p.norm, cfg.rms_eps)?;
    let q = tape.matmul(h, p.w_q)?;
    let k = tape.matmul(h, p.w_k)?;
    let v = tape.matmul(h, p.w_v)?;
    let spec = |scale: Option<u64>| RopeSpec {
        table: ctx.tables.sa.clone(),
        head_dim: dh,
        seq_len: ctx.seq_len,
        start: ctx.start,
        log_scale_base: scale,
    };
    let q = tape.rope(q, spec(cfg.long_position_scaling.then_some(cfg.log_scale_base)))?;
    let k = tape.rope(k, spec(None))?;
    let (k_all, v_all, tk) = match cache {
        None => (k, v, ctx.seq_len),
        Some(cache) => {
            if ctx.batch != 1 {
                return Err(Error::invalid("KV cache supports a single sequence"));
            }
            check_cache_pos(cache.position, ctx)?;
            let (k_all, v_all) = match (&cache.k, &cache.v) {
                (Some(pk), Some(pv)) => {
                    let pk = tape.constant(pk.clone());
                    let pv = tape.constant(pv.clone());
                    (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?)
                }
                _ => (k, v),
            };
            cache.k = Some(tape.value(k_all).clone());
            cache.v = Some(tape.value(v_all).clone());
            cache.position += ctx.seq_len;
            (k_all, v_all, cache.position)
        }
    };
    let layout = AttnLayout {
        batch: ctx.batch,
        tq: ctx.seq_len,
        tk,
        heads: cfg.n_heads,
        head_dim: dh,
        value_dim: dh,
    };
    let y = tape.attention(q, k_all, v_all, layout, Normalize::Softmax)?;
    let out = tape.matmul(y, p.w_o)?;
    tape.add(x, out)
}

/// Mixer then FFN, each pre-normed with its own residual.
pub fn sublayer_forward(
    tape: &mut Tape,
    x: Var,
    layer: &SubLayer<Var>,
    ctx: &SeqCtx<'_>,
    cache: Option<&mut LayerCache>,
) -> Result<Var> {
    let x = match (&layer.mixer, cache) {
        (Mixer::Ss(p), Some(LayerCache::Ss(c))) => ss_block_forward(tape, x, p, ctx, Some(c))?,
        (Mixer::Ss(p), None) => ss_block_forward(tape, x, p, ctx, None)?,
        (Mixer::Sa(p), Some(LayerCache::Sa(c))) => sa_block_forward(tape, x, p, ctx, Some(c))?,
        (Mixer::Sa(p), None) => sa_block_forward(tape, x, p, ctx, None)?,
        _ => return Err(Error::invalid("cache kind does not match layer kind")),
    };
    let h = tape.rmsnorm(x, layer.ffn_norm, ctx.cfg.rms_eps)?;
    let f = ffn_forward(tape, h, &layer.ffn)?;
    tape.add(x, f)
}

/// Runs every sub-layer of a module in order.
pub fn hybrid_module_forward(
    tape: &mut Tape,
    mut x: Var,
    p: &HybridModuleParams<Var>,
    ctx: &SeqCtx<'_>,
    mut caches: Option<&mut [LayerCache]>,
) -> Result<Var> {
    if let Some(c) = &caches {
        if c.len() != p.layers.len() {
            return Err(Error::invalid("one cache per sub-layer required"));
        }
    }
    for (i, layer) in p.layers.iter().enumerate() {
        let cache = caches.as_deref_mut().map(|c| &mut c[i]);
        x = sublayer_forward(tape, x, layer, ctx, cache)?;
    }
    Ok(x)
}
