//! Registry of executable invariants.
//!
//! Each property draws its own seeded instances, compares against an
//! independent oracle, and reports the worst error it saw next to the
//! tolerance it was held to.

use std::sync::Arc;

use serde::Serialize;

use crate::attention::{
    attention_multihead_forward, causal_attention, linear_attention, AttentionInputs, AttnLayout, FeatureMap, Normalize,
    LINEAR_EPS,
};
use crate::autodiff::{directional_check, grad_check_sampled, RopeSpec, Tape, Var};
use crate::blocks::{
    ffn_forward, hybrid_module_forward, rmsnorm_tensor, sa_block_forward, ss_block_forward, sublayer_forward,
    zero_outputs, FfnParams, HybridModuleParams, LayerCache, Mixer, ParamTree, RopeTables, SeqCtx,
};
use crate::config::{ModelConfig, RunConfig, RunMetadata};
use crate::error::Result;
use crate::lm::tokenizer::VOCAB_SIZE;
use crate::lm::{generate, logits, model_forward, LmParams};
use crate::rng::Rng;
use crate::rope::{self, FrequencyTable, Role};
use crate::ssd::{decay_mask, ssd_chunked, ssd_matrix, ssd_recurrent, RecurrentSsd, SsdInputs, SsdLayout};
use crate::tensor::{matmul, softmax_rows, Precision, Tensor};

/// What one property observed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub instances: usize,
    pub worst_error: f64,
    pub tolerance: f64,
}

impl Outcome {
    fn new(tolerance: f64) -> Self {
        Outcome { instances: 0, worst_error: 0.0, tolerance }
    }

    fn record(&mut self, err: f64) {
        self.instances += 1;
        // NaN counts as a failure
        if !(err <= self.worst_error) {
            self.worst_error = if err.is_nan() { f64::INFINITY } else { err };
        }
    }

    /// Structural checks: `ok` counts as error 0, otherwise infinity.
    fn check(&mut self, ok: bool) {
        self.record(if ok { 0.0 } else { f64::INFINITY });
    }

    pub fn passed(&self) -> bool {
        self.instances > 0 && self.worst_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyReport {
    pub name: &'static str,
    pub passed: bool,
    pub instances: usize,
    pub worst_error: f64,
    pub tolerance: f64,
    pub error: Option<String>,
}

pub struct Property {
    pub name: &'static str,
    pub run: fn() -> Result<Outcome>,
}

macro_rules! registry {
    ($($name:literal => $f:ident),* $(,)?) => {
        pub const PROPERTY_NAMES: &[&str] = &[$($name),*];

        pub fn registry() -> Vec<Property> {
            vec![$(Property { name: $name, run: $f }),*]
        }
    };
}

registry! {
    "tensor.matmul_associativity" => matmul_associativity,
    "tensor.softmax_rows_stochastic" => softmax_rows_stochastic,
    "rng.stream_reproducible" => rng_stream_reproducible,
    "autodiff.finite_differences" => autodiff_finite_differences,
    "autodiff.independent_param_zero_grad" => independent_param_zero_grad,
    "rope.norm_preservation" => rope_norm_preservation,
    "rope.composition" => rope_composition,
    "rope.shift_invariance" => rope_shift_invariance,
    "rope.identity_at_zero" => rope_identity_at_zero,
    "rope.role_uniformity" => rope_role_uniformity,
    "rope.matrix_form" => rope_matrix_form,
    "ssd.three_form_equivalence" => ssd_three_forms,
    "ssd.attention_duality" => ssd_attention_duality,
    "ssd.causality" => ssd_causality,
    "ssd.decay_monotonicity" => ssd_decay_monotonicity,
    "ssd.recurrent_constant_state" => ssd_recurrent_constant_state,
    "attention.causality" => attention_causality,
    "attention.softmax_rows_sum_to_one" => attention_rows_sum_to_one,
    "attention.linear_recurrent_equivalence" => attention_linear_recurrent,
    "attention.permutation_sensitivity" => attention_permutation_sensitivity,
    "blocks.zero_projection_identity" => blocks_zero_projection_identity,
    "blocks.cache_consistency" => blocks_cache_consistency,
    "blocks.pattern_enforced" => blocks_pattern_enforced,
    "blocks.rmsnorm_bounded" => blocks_rmsnorm_bounded,
    "lm.causality" => lm_causality,
    "lm.cache_consistency" => lm_cache_consistency,
    "lm.untrained_loss_ln_vocab" => lm_untrained_loss,
    "lm.ablation_isolated_to_ss" => lm_ablation_isolated,
    "cli.run_metadata" => cli_run_metadata,
    "cli.verify_coverage" => cli_verify_coverage,
}

/// Runs every property whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>) -> Vec<PropertyReport> {
    registry()
        .into_iter()
        .filter(|p| filter.is_none_or(|f| p.name.contains(f)))
        .map(|p| match (p.run)() {
            Ok(o) => PropertyReport {
                name: p.name,
                passed: o.passed(),
                instances: o.instances,
                worst_error: o.worst_error,
                tolerance: o.tolerance,
                error: None,
            },
            Err(e) => PropertyReport {
                name: p.name,
                passed: false,
                instances: 0,
                worst_error: f64::INFINITY,
                tolerance: 0.0,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn bit_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn table(d: usize) -> FrequencyTable {
    FrequencyTable::new(d, rope::DEFAULT_BASE).expect("even dim")
}

// ---------------------------------------------------------------- tensor, rng

fn matmul_associativity() -> Result<Outcome> {
    let mut o = Outcome::new(1e-10);
    let mut rng = Rng::new(11);
    for _ in 0..50 {
        let (m, k, n, p) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8));
        let a = rng.normal_tensor([m, k], 1.0);
        let b = rng.normal_tensor([k, n], 1.0);
        let c = rng.normal_tensor([n, p], 1.0);
        let left = matmul(&matmul(&a, &b)?, &c)?;
        let right = matmul(&a, &matmul(&b, &c)?)?;
        o.record(left.max_abs_diff(&right));
    }
    Ok(o)
}

fn softmax_rows_stochastic() -> Result<Outcome> {
    let mut o = Outcome::new(1e-12);
    let mut rng = Rng::new(12);
    for i in 0..50 {
        let (r, c) = (1 + rng.below(6), 1 + rng.below(12));
        let scale = [1.0, 30.0, 1e4][i % 3];
        let x = rng.normal_tensor([r, c], scale);
        // keep column 0 so no row is fully masked
        let mask = Tensor::new([r, c], (0..r * c).map(|j| f64::from(j % c == 0 || rng.uniform() < 0.7)).collect())?;
        for m in [None, Some(&mask)] {
            let s = softmax_rows(&x, m)?;
            let in_range = s.data().iter().all(|v| (0.0..=1.0).contains(v));
            let worst = (0..r).map(|row| (s.row(row).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
            o.record(if in_range { worst } else { f64::INFINITY });
        }
    }
    Ok(o)
}

fn rng_stream_reproducible() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    for seed in [0, 1, 42, u64::MAX] {
        let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
        o.check((0..10_000).all(|_| a.next_u64() == b.next_u64()));
        let (mut fa, mut fb) = (Rng::new(seed).fork(3), Rng::new(seed).fork(3));
        o.check((0..10_000).all(|_| fa.uniform().to_bits() == fb.uniform().to_bits()));
    }
    Ok(o)
}

// ---------------------------------------------------------------- autodiff

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// `sum(y ∘ r)` for a fixed random `r`, so every output coordinate matters.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let r = t.constant(Rng::new(seed ^ 0x5eed).normal_tensor(shape, 1.0));
    let m = t.mul(y, r)?;
    Ok(t.sum(m))
}

/// Redraws every matrix with a larger standard deviation.
fn boost<P: ParamTree<Tensor>>(params: &mut P, rng: &mut Rng, std: f64) {
    params.visit_mut("", &mut |_, t| {
        if t.ndim() == 2 {
            *t = rng.normal_tensor(t.shape().to_vec(), std);
        }
    });
}

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig { d_model: 8, n_modules: 1, n_heads: 2, d_state: 4, chunk_len: 3, max_position: 64, ..ModelConfig::micro() }
}

/// Differentiable ops with their parameter instances for one seed.
fn gradient_cases(seed: u64) -> Vec<(&'static str, LossFn, Vec<Tensor>)> {
    let mut rng = Rng::new(seed);
    let mut n = |shape: &[usize], std: f64| rng.normal_tensor(shape.to_vec(), std);
    let mut cases: Vec<(&'static str, LossFn, Vec<Tensor>)> = Vec::new();
    macro_rules! case {
        ($name:literal, [$($p:expr),*], |$t:ident, $v:ident| $body:expr) => {
            cases.push(($name, Box::new(move |$t: &mut Tape, $v: &[Var]| {
                let y = $body;
                probe($t, y, seed)
            }), vec![$($p),*]));
        };
    }
    case!("matmul", [n(&[3, 4], 1.0), n(&[4, 2], 1.0)], |t, v| t.matmul(v[0], v[1])?);
    case!("add", [n(&[3, 4], 1.0), n(&[3, 4], 1.0)], |t, v| t.add(v[0], v[1])?);
    case!("add_bias", [n(&[3, 4], 1.0), n(&[4], 1.0)], |t, v| t.add_bias(v[0], v[1])?);
    case!("mul", [n(&[3, 4], 1.0), n(&[3, 4], 1.0)], |t, v| t.mul(v[0], v[1])?);
    case!("scale", [n(&[5], 1.0)], |t, v| t.scale(v[0], -1.7));
    case!("mean", [n(&[2, 3], 1.0)], |t, v| t.mean(v[0]));
    case!("sigmoid", [n(&[3, 3], 2.0)], |t, v| t.sigmoid(v[0]));
    case!("silu", [n(&[3, 3], 2.0)], |t, v| t.silu(v[0]));
    case!("rmsnorm", [n(&[3, 6], 1.0), n(&[6], 1.0)], |t, v| t.rmsnorm(v[0], v[1], 1e-6)?);
    let tab = Arc::new(table(4));
    let tab2 = tab.clone();
    case!("rope", [n(&[6, 8], 1.0)], |t, v| t.rope(
        v[0],
        RopeSpec { table: tab.clone(), head_dim: 4, seq_len: 3, start: 2, log_scale_base: None }
    )?);
    case!("rope_log_scaled", [n(&[6, 8], 1.0)], |t, v| t.rope(
        v[0],
        RopeSpec { table: tab2.clone(), head_dim: 4, seq_len: 6, start: 1, log_scale_base: Some(2) }
    )?);
    case!("embedding", [n(&[5, 3], 1.0)], |t, v| t.embedding(v[0], &[4, 0, 4, 2])?);
    case!("cross_entropy", [n(&[4, 6], 2.0)], |t, v| t.cross_entropy(v[0], &[1, 5, 0, 2], &[true, false, true, true])?);
    let (bt, h, ns, p) = (2, 2, 4, 3);
    let mut aux = Rng::new(seed).fork(1);
    let a = aux.uniform_tensor([bt * 5, h], 0.5, 1.0);
    let init: Vec<Vec<f64>> = (0..bt * h).map(|_| aux.normal_tensor([ns * p], 0.5).into_data()).collect();
    let layout = SsdLayout { batch: bt, seq_len: 5, heads: h, state_dim: ns, head_dim: p };
    case!(
        "ssd",
        [a, n(&[10, h * ns], 1.0), n(&[10, h * ns], 1.0), n(&[10, h * p], 1.0)],
        |t, v| t.ssd(v[0], v[1], v[2], v[3], layout, 2, Some(init.clone()))?.0
    );
    for (name, norm, tq) in [("attention_softmax", Normalize::Softmax, 4), ("attention_linear_scores", Normalize::None, 2)] {
        let l = AttnLayout { batch: 2, tq, tk: 4, heads: 2, head_dim: 2, value_dim: 3 };
        let params = vec![n(&[2 * tq, 4], 1.0), n(&[8, 4], 1.0), n(&[8, 6], 1.0)];
        cases.push((
            name,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.attention(v[0], v[1], v[2], l, norm)?;
                probe(t, y, seed)
            }),
            params,
        ));
    }
    case!("concat_rows", [n(&[2, 3], 1.0), n(&[1, 3], 1.0)], |t, v| t.concat_rows(&[v[0], v[1]])?);
    case!("ffn", [n(&[3, 4], 1.0), n(&[4, 16], 0.5), n(&[16, 4], 0.5)], |t, v| ffn_forward(
        t,
        v[0],
        &FfnParams { w1: v[1], w2: v[2] }
    )?);

    // sub-layers and a whole module on the tiny config
    let cfg = tiny_model_cfg();
    let mut init_rng = Rng::new(seed + 100);
    let mut module = HybridModuleParams::init(&cfg, &mut init_rng);
    boost(&mut module, &mut init_rng, 0.4);
    let x = n(&[4, 8], 1.0);
    for (name, which) in [("ss_block", Some(0)), ("sa_block", Some(7)), ("hybrid_module", None)] {
        let cfg = cfg.clone();
        let mut params = vec![x.clone()];
        match which {
            Some(i) => module.layers()[i].visit("", &mut |_, t| params.push(t.clone())),
            None => module.visit("", &mut |_, t| params.push(t.clone())),
        }
        let template = module.clone();
        cases.push((
            name,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let tables = RopeTables::new(&cfg)?;
                let ctx = SeqCtx { cfg: &cfg, tables: &tables, batch: 1, seq_len: 4, start: 0 };
                let mut it = v[1..].iter().copied();
                let y = match which {
                    Some(i) => {
                        let layer = template.layers()[i].map(&mut |_| it.next().expect("one var per leaf"));
                        sublayer_forward(t, v[0], &layer, &ctx, None)?
                    }
                    None => {
                        let m = template.map(&mut |_| it.next().expect("one var per leaf"));
                        hybrid_module_forward(t, v[0], &m, &ctx, None)?
                    }
                };
                probe(t, y, seed)
            }),
            params,
        ));
    }
    cases
}

/// End-to-end micro model on a 2-token input; coordinates are sampled.
fn micro_model_case(seed: u64) -> Result<(LossFn, Vec<Tensor>)> {
    let cfg = ModelConfig::micro();
    let mut rng = Rng::new(seed + 200);
    let mut params = LmParams::init(&cfg, &mut rng)?;
    // well-scaled weights keep every gradient above finite-difference noise
    boost(&mut params, &mut rng, 0.2);
    let mut flat = Vec::new();
    params.visit("", &mut |_, t| flat.push(t.clone()));
    let ids = [rng.below(VOCAB_SIZE), rng.below(VOCAB_SIZE)];
    let targets = [rng.below(VOCAB_SIZE), rng.below(VOCAB_SIZE)];
    let f: LossFn = Box::new(move |t: &mut Tape, v: &[Var]| {
        let tables = RopeTables::new(&cfg)?;
        let mut it = v.iter().copied();
        let bound = params.map(&mut |_| it.next().expect("one var per leaf"));
        let logits = model_forward(t, &bound, &cfg, &tables, &ids, 1, 0, None)?;
        t.cross_entropy(logits, &targets, &[true, true])
    });
    Ok((f, flat))
}

fn autodiff_finite_differences() -> Result<Outcome> {
    let mut o = Outcome::new(1e-4);
    for seed in [1, 2, 3] {
        for (_, f, params) in gradient_cases(seed) {
            let rep = grad_check_sampled(f, &params, 1e-5, 1e-4, seed, 64)?;
            o.record(rep.max_rel_err());
        }
        // per-coordinate differences cannot resolve the many tiny gradients
        // of a deep model at this step size, so the whole model is probed
        // along random directions instead
        let (f, params) = micro_model_case(seed)?;
        let rep = directional_check(f, &params, 1e-5, 1e-4, seed, 8)?;
        o.record(rep.max_rel_err);
    }
    Ok(o)
}

/// Names of the gradient cases, for reporting.
pub fn gradient_case_names() -> Vec<&'static str> {
    let mut v: Vec<_> = gradient_cases(0).into_iter().map(|c| c.0).collect();
    v.push("micro_model");
    v
}

fn independent_param_zero_grad() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut rng = Rng::new(13);
    for _ in 0..5 {
        let mut t = Tape::new();
        let a = t.param(rng.normal_tensor([3, 3], 1.0));
        let unused = t.param(rng.normal_tensor([4], 1.0));
        let s = t.silu(a);
        let loss = t.sum(s);
        let g = t.backward(loss)?;
        o.check(g.get(unused).is_some_and(|g| g.data().iter().all(|v| v.to_bits() == 0)));
    }
    Ok(o)
}

// ---------------------------------------------------------------- rope

fn rope_norm_preservation() -> Result<Outcome> {
    let mut o = Outcome::new(1e-12);
    let mut rng = Rng::new(21);
    for d in [2, 4, 8, 64] {
        let tab = table(d);
        for _ in 0..25 {
            let x = rng.normal_tensor([d], 1.0);
            let m = rng.below(100_000);
            o.record((rope::rotate(&x, m, &tab)?.norm() - x.norm()).abs());
        }
    }
    Ok(o)
}

fn rope_composition() -> Result<Outcome> {
    let mut o = Outcome::new(1e-10);
    let mut rng = Rng::new(22);
    let tab = table(16);
    for _ in 0..100 {
        let x = rng.normal_tensor([16], 1.0);
        let (m1, m2) = (rng.below(5000), rng.below(5000));
        let twice = rope::rotate(&rope::rotate(&x, m1, &tab)?, m2, &tab)?;
        let once = rope::rotate(&x, m1 + m2, &tab)?;
        o.record(twice.max_abs_diff(&once));
    }
    Ok(o)
}

fn rope_shift_invariance() -> Result<Outcome> {
    let mut o = Outcome::new(1e-10);
    let mut rng = Rng::new(23);
    let tab = table(16);
    for _ in 0..200 {
        let q = rng.normal_tensor([16], 1.0);
        let k = rng.normal_tensor([16], 1.0);
        let (m, n, s) = (rng.below(2000), rng.below(2000), rng.below(2000));
        let base = rope::relative_score(&q, m, &k, n, &tab)?;
        let shifted = rope::relative_score(&q, m + s, &k, n + s, &tab)?;
        o.record((base - shifted).abs());
    }
    Ok(o)
}

fn rope_identity_at_zero() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut rng = Rng::new(24);
    for d in [2, 6, 32] {
        let x = rng.normal_tensor([3, d], 10.0);
        o.check(bit_equal(rope::rotate(&x, 0, &table(d))?.data(), x.data()));
    }
    Ok(o)
}

fn rope_role_uniformity() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut rng = Rng::new(25);
    let tab = table(8);
    for _ in 0..20 {
        let x = rng.normal_tensor([8], 1.0);
        let m = rng.below(10_000);
        let reference = rope::rotate_role(&x, m, Role::Query, &tab)?;
        for role in [Role::Key, Role::C, Role::B] {
            o.check(bit_equal(rope::rotate_role(&x, m, role, &tab)?.data(), reference.data()));
        }
    }
    Ok(o)
}

fn rope_matrix_form() -> Result<Outcome> {
    let mut o = Outcome::new(1e-12);
    let mut rng = Rng::new(26);
    for d in [2, 4, 10] {
        let tab = table(d);
        for _ in 0..20 {
            let m = rng.below(4096);
            let mut r = Tensor::zeros([d, d]);
            for i in 0..d / 2 {
                let ang = m as f64 * rope::DEFAULT_BASE.powf(-2.0 * i as f64 / d as f64);
                let (s, c) = ang.sin_cos();
                let (a, b) = (2 * i, 2 * i + 1);
                r.data_mut()[a * d + a] = c;
                r.data_mut()[a * d + b] = -s;
                r.data_mut()[b * d + a] = s;
                r.data_mut()[b * d + b] = c;
            }
            let x = rng.normal_tensor([d, 1], 1.0);
            let explicit = matmul(&r, &x)?;
            let rotated = rope::rotate(&x.clone().reshape([d])?, m, &tab)?;
            o.record(max_diff(explicit.data(), rotated.data()));
        }
    }
    Ok(o)
}

// ---------------------------------------------------------------- ssd

fn ssd_instance(rng: &mut Rng, t: usize, n: usize, p: usize, unit_decay: bool) -> Result<SsdInputs> {
    let a = if unit_decay { Tensor::ones([t]) } else { rng.uniform_tensor([t], 0.5, 1.0) };
    SsdInputs::new(a, rng.normal_tensor([t, n], 1.0), rng.normal_tensor([t, n], 1.0), rng.normal_tensor([t, p], 1.0))
}

fn ssd_three_forms() -> Result<Outcome> {
    let mut o = Outcome::new(1e-9);
    let mut rng = Rng::new(31);
    for use_rope in [true, false] {
        for unit in [true, false] {
            for _ in 0..50 {
                let (t, n, p) = (1 + rng.below(64), 2 * (1 + rng.below(4)), 1 + rng.below(4));
                let inp = ssd_instance(&mut rng, t, n, p, unit)?;
                let tab = table(n);
                let rec = ssd_recurrent(&inp, &tab, use_rope)?;
                let mat = ssd_matrix(&inp, &tab, use_rope)?;
                let chunk = ssd_chunked(&inp, &tab, use_rope, 1 + rng.below(t + 2))?;
                o.record(rec.max_abs_diff(&mat).max(rec.max_abs_diff(&chunk)));
            }
        }
    }
    Ok(o)
}

fn ssd_attention_duality() -> Result<Outcome> {
    let mut o = Outcome::new(1e-10);
    let mut rng = Rng::new(32);
    for _ in 0..50 {
        let (t, n, p) = (1 + rng.below(24), 2 * (1 + rng.below(4)), 1 + rng.below(4));
        let inp = ssd_instance(&mut rng, t, n, p, true)?;
        let tab = table(n);
        let ssd = ssd_matrix(&inp, &tab, true)?;
        let attn = causal_attention(
            &AttentionInputs::new(inp.c.clone(), inp.b.clone(), inp.x.clone(), 1)?,
            &tab,
            Normalize::None,
        )?;
        o.record(ssd.max_abs_diff(&attn));
    }
    Ok(o)
}

fn ssd_causality() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut rng = Rng::new(33);
    for _ in 0..30 {
        let t = 2 + rng.below(20);
        let inp = ssd_instance(&mut rng, t, 4, 2, false)?;
        let tab = table(4);
        let k = rng.below(t);
        let mut pert = inp.clone();
        pert.x.row_mut(k).iter_mut().for_each(|v| *v += 1.0);
        for chunk in [None, Some(1 + rng.below(t))] {
            let (y0, y1) = match chunk {
                None => (ssd_recurrent(&inp, &tab, true)?, ssd_recurrent(&pert, &tab, true)?),
                Some(c) => (ssd_chunked(&inp, &tab, true, c)?, ssd_chunked(&pert, &tab, true, c)?),
            };
            o.check((0..k).all(|r| bit_equal(y0.row(r), y1.row(r))));
        }
    }
    Ok(o)
}

fn ssd_decay_monotonicity() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut rng = Rng::new(34);
    for _ in 0..30 {
        let t = 2 + rng.below(16);
        let a = rng.uniform_tensor([t], 0.5, 1.0);
        let s = 1 + rng.below(t - 1);
        let mut smaller = a.clone();
        smaller.data_mut()[s] *= 0.9;
        let (l0, l1) = (decay_mask(&a)?.0, decay_mask(&smaller)?.0);
        let mut ok = true;
        for j in 0..t {
            for i in 0..=j {
                let (x, y) = (l0.at(j, i), l1.at(j, i));
                ok &= if i < s && s <= j { y < x } else { y == x };
            }
        }
        o.check(ok);
    }
    Ok(o)
}

fn ssd_recurrent_constant_state() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut rng = Rng::new(35);
    let (n, p) = (8, 3);
    let tab = table(n);
    let mut ssd = RecurrentSsd::new(n, p);
    let bytes = ssd.state_bytes();
    o.check(bytes == n * p * std::mem::size_of::<f64>());
    for _ in 0..200 {
        let b = rng.normal_tensor([n], 1.0);
        let c = rng.normal_tensor([n], 1.0);
        let x = rng.normal_tensor([p], 1.0);
        ssd.step(rng.uniform_range(0.5, 1.0), b.data(), c.data(), x.data(), Some(&tab))?;
        o.check(ssd.state_bytes() == bytes);
    }
    Ok(o)
}

// ---------------------------------------------------------------- attention

fn attention_causality() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut rng = Rng::new(41);
    for _ in 0..30 {
        let t = 2 + rng.below(12);
        let (q, k, v) = (rng.normal_tensor([t, 8], 1.0), rng.normal_tensor([t, 8], 1.0), rng.normal_tensor([t, 6], 1.0));
        let m = rng.below(t - 1);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for r in m + 1..t {
            k2.row_mut(r).iter_mut().for_each(|x| *x = -*x * 3.0);
            v2.row_mut(r).iter_mut().for_each(|x| *x += 5.0);
        }
        let tab = table(4);
        for norm in [Normalize::Softmax, Normalize::None] {
            let y0 = causal_attention(&AttentionInputs::new(q.clone(), k.clone(), v.clone(), 2)?, &tab, norm)?;
            let y1 = causal_attention(&AttentionInputs::new(q.clone(), k2.clone(), v2.clone(), 2)?, &tab, norm)?;
            o.check((0..=m).all(|r| bit_equal(y0.row(r), y1.row(r))));
        }
    }
    Ok(o)
}

fn attention_rows_sum_to_one() -> Result<Outcome> {
    let mut o = Outcome::new(1e-12);
    let mut rng = Rng::new(42);
    for _ in 0..20 {
        let (tq, extra) = (1 + rng.below(10), rng.below(5));
        let tk = tq + extra;
        let l = AttnLayout { batch: 2, tq, tk, heads: 2, head_dim: 4, value_dim: 3 };
        let q = rng.normal_tensor([2 * tq, 8], 3.0);
        let k = rng.normal_tensor([2 * tk, 8], 3.0);
        let v = rng.normal_tensor([2 * tk, 6], 1.0);
        let (_, weights) = attention_multihead_forward(&q, &k, &v, l, Normalize::Softmax, true)?;
        for w in &weights {
            for row in w.chunks(tk) {
                o.record((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok(o)
}

fn attention_linear_recurrent() -> Result<Outcome> {
    let mut o = Outcome::new(1e-10);
    let mut rng = Rng::new(43);
    let (d, p) = (6, 3);
    let tab = table(d);
    for fmap in [FeatureMap::Identity, FeatureMap::EluPlusOne] {
        for _ in 0..20 {
            let t = 1 + rng.below(16);
            let (q, k, v) = (rng.normal_tensor([t, d], 1.0), rng.normal_tensor([t, d], 1.0), rng.normal_tensor([t, p], 1.0));
            let (y, _) = linear_attention(&q, &k, &v, &tab, fmap, fmap)?;
            let rq = rope::rotate_sequence(&q, 0, &tab)?;
            let rk = rope::rotate_sequence(&k, 0, &tab)?;
            for i in 0..t {
                let fq = fmap.apply_vec(rq.row(i));
                let mut num = vec![0.0; p];
                let (mut den, mut scale) = (0.0, 0.0);
                for j in 0..=i {
                    let fk = fmap.apply_vec(rk.row(j));
                    let w: f64 = fq.iter().zip(&fk).map(|(a, b)| a * b).sum();
                    den += w;
                    for (n, vv) in num.iter_mut().zip(v.row(j)) {
                        *n += w * vv;
                    }
                    scale += w.abs() * v.row(j).iter().fold(0.0f64, |m, x| m.max(x.abs()));
                }
                let direct: Vec<f64> =
                    if den.abs() < LINEAR_EPS { num } else { num.iter().map(|n| n / den).collect() };
                // error measured relative to the magnitude of the summed terms
                let unit = if den.abs() < LINEAR_EPS { scale.max(1.0) } else { (scale / den.abs()).max(1.0) };
                o.record(max_diff(y.row(i), &direct) / unit);
            }
        }
    }
    Ok(o)
}

fn attention_permutation_sensitivity() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut rng = Rng::new(44);
    let tab = table(4);
    for _ in 0..20 {
        let t = 6;
        let (q, k, v) = (rng.normal_tensor([t, 4], 1.0), rng.normal_tensor([t, 4], 1.0), rng.normal_tensor([t, 3], 1.0));
        let perm: Vec<usize> = vec![1, 0, 2, 3, 5, 4];
        let pick = |x: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let y = causal_attention(&AttentionInputs::new(q.clone(), k.clone(), v.clone(), 1)?, &tab, Normalize::Softmax)?;
        let yp = causal_attention(&AttentionInputs::new(pick(&q)?, pick(&k)?, pick(&v)?, 1)?, &tab, Normalize::Softmax)?;
        o.check(pick(&y)?.max_abs_diff(&yp) > 1e-3);
    }
    Ok(o)
}

// ---------------------------------------------------------------- blocks

fn blocks_zero_projection_identity() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let cfg = tiny_model_cfg();
    let tables = RopeTables::new(&cfg)?;
    let mut rng = Rng::new(51);
    let module = HybridModuleParams::init(&cfg, &mut rng);
    let x = rng.normal_tensor([2 * 5, 8], 1.0);
    for layer in module.layers() {
        let mut layer = layer.clone();
        zero_outputs(&mut layer);
        let mut t = Tape::inference();
        let bound = layer.map(&mut |p| t.constant(p.clone()));
        let xv = t.constant(x.clone());
        let ctx = SeqCtx { cfg: &cfg, tables: &tables, batch: 2, seq_len: 5, start: 3 };
        let y = sublayer_forward(&mut t, xv, &bound, &ctx, None)?;
        o.check(bit_equal(t.value(y).data(), x.data()));
    }
    Ok(o)
}

fn blocks_cache_consistency() -> Result<Outcome> {
    let mut o = Outcome::new(1e-9);
    let cfg = tiny_model_cfg();
    let tables = RopeTables::new(&cfg)?;
    let mut rng = Rng::new(52);
    for _ in 0..3 {
        let mut module = HybridModuleParams::init(&cfg, &mut rng);
        boost(&mut module, &mut rng, 0.4);
        let t_len = 2 + rng.below(9);
        let x = rng.normal_tensor([t_len, 8], 1.0);
        for idx in [0, 7] {
            let mut t = Tape::inference();
            let layer = module.layers()[idx].map(&mut |p| t.constant(p.clone()));
            let full_ctx = SeqCtx { cfg: &cfg, tables: &tables, batch: 1, seq_len: t_len, start: 0 };
            let xv = t.constant(x.clone());
            let full = match &layer.mixer {
                Mixer::Ss(p) => ss_block_forward(&mut t, xv, p, &full_ctx, None)?,
                Mixer::Sa(p) => sa_block_forward(&mut t, xv, p, &full_ctx, None)?,
            };
            let full = t.value(full).clone();
            let mut cache = LayerCache::for_kind(layer.kind());
            // prefix in one call, then single tokens
            let split = 1 + rng.below(t_len);
            let mut start = 0;
            let mut rows = Vec::new();
            for len in std::iter::once(split).chain(std::iter::repeat_n(1, t_len - split)) {
                let ctx = SeqCtx { cfg: &cfg, tables: &tables, batch: 1, seq_len: len, start };
                let xv = t.constant(x.row_range(start, len));
                let y = match (&layer.mixer, &mut cache) {
                    (Mixer::Ss(p), LayerCache::Ss(c)) => ss_block_forward(&mut t, xv, p, &ctx, Some(c))?,
                    (Mixer::Sa(p), LayerCache::Sa(c)) => sa_block_forward(&mut t, xv, p, &ctx, Some(c))?,
                    _ => unreachable!(),
                };
                rows.push(t.value(y).clone());
                start += len;
            }
            let inc = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?;
            o.record(inc.max_abs_diff(&full));
        }
    }
    Ok(o)
}

fn blocks_pattern_enforced() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let cfg = tiny_model_cfg();
    let module = HybridModuleParams::init(&cfg, &mut Rng::new(53));
    o.check(HybridModuleParams::new(module.layers().to_vec(), &cfg).is_ok());
    for i in 0..7 {
        let mut layers = module.layers().to_vec();
        layers.swap(i, 7);
        o.check(HybridModuleParams::new(layers, &cfg).is_err());
    }
    let mut short = module.layers().to_vec();
    short.remove(0);
    o.check(HybridModuleParams::new(short, &cfg).is_err());
    Ok(o)
}

fn blocks_rmsnorm_bounded() -> Result<Outcome> {
    let mut o = Outcome::new(1e-12);
    let mut rng = Rng::new(54);
    for _ in 0..50 {
        let d = 1 + rng.below(32);
        let x = rng.normal_tensor([4, d], 100.0);
        let gain = rng.normal_tensor([d], 2.0);
        let max_gain = gain.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let y = rmsnorm_tensor(&x, &gain, 1e-6)?;
        for r in 0..4 {
            let rms = (y.row(r).iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();
            o.record((rms - max_gain).max(0.0));
        }
    }
    Ok(o)
}

// ---------------------------------------------------------------- lm

fn lm_small() -> ModelConfig {
    ModelConfig { d_model: 16, n_modules: 2, n_heads: 2, d_state: 4, chunk_len: 3, max_position: 64, ..ModelConfig::micro() }
}

fn lm_causality() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let cfg = lm_small();
    let mut rng = Rng::new(61);
    let params = LmParams::init(&cfg, &mut rng)?;
    for _ in 0..5 {
        let t = 4 + rng.below(8);
        let ids: Vec<usize> = (0..t).map(|_| rng.below(VOCAB_SIZE)).collect();
        let pos = rng.below(t);
        let mut edited = ids.clone();
        edited[pos] = (edited[pos] + 1 + rng.below(VOCAB_SIZE - 1)) % VOCAB_SIZE;
        let (a, b) = (logits(&params, &cfg, &ids)?, logits(&params, &cfg, &edited)?);
        o.check((0..pos).all(|r| bit_equal(a.row(r), b.row(r))));
        o.check(a.row(pos) != b.row(pos));
    }
    Ok(o)
}

fn lm_cache_consistency() -> Result<Outcome> {
    let mut o = Outcome::new(1e-9);
    let cfg = lm_small();
    let mut rng = Rng::new(62);
    for _ in 0..3 {
        let mut params = LmParams::init(&cfg, &mut rng)?;
        boost(&mut params, &mut rng, 0.3);
        let prompt: Vec<usize> = (0..1 + rng.below(5)).map(|_| rng.below(VOCAB_SIZE)).collect();
        let g = generate(&params, &cfg, &prompt, 8, 1.0, &mut rng)?;
        for (i, step) in g.step_logits.iter().enumerate() {
            let full = logits(&params, &cfg, &g.ids[..prompt.len() + i])?;
            o.record(max_diff(full.row(full.rows() - 1), step));
        }
    }
    Ok(o)
}

fn lm_untrained_loss() -> Result<Outcome> {
    let mut o = Outcome::new(0.05);
    let cfg = ModelConfig::micro();
    let want = (VOCAB_SIZE as f64).ln();
    for seed in [1, 2, 3] {
        let mut rng = Rng::new(seed);
        let params = LmParams::init(&cfg, &mut rng)?;
        let ids: Vec<usize> = (0..65).map(|_| rng.below(VOCAB_SIZE)).collect();
        let l = logits(&params, &cfg, &ids[..64])?;
        let mut t = Tape::inference();
        let lv = t.constant(l);
        let loss = t.cross_entropy(lv, &ids[1..], &[true; 64])?;
        o.record((t.value(loss).item() - want).abs() / want);
    }
    Ok(o)
}

fn lm_ablation_isolated() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let on = tiny_model_cfg();
    let off = ModelConfig { use_rope_on_ssd: false, ..on.clone() };
    let mut rng = Rng::new(63);
    let module = HybridModuleParams::init(&on, &mut rng);
    let x = rng.normal_tensor([6, 8], 1.0);
    let run = |cfg: &ModelConfig, idx: usize| -> Result<Tensor> {
        let tables = RopeTables::new(cfg)?;
        let mut t = Tape::inference();
        let layer = module.layers()[idx].map(&mut |p| t.constant(p.clone()));
        let xv = t.constant(x.clone());
        let ctx = SeqCtx { cfg, tables: &tables, batch: 1, seq_len: 6, start: 0 };
        let y = sublayer_forward(&mut t, xv, &layer, &ctx, None)?;
        Ok(t.value(y).clone())
    };
    o.check(bit_equal(run(&on, 7)?.data(), run(&off, 7)?.data()));
    o.check(run(&on, 0)?.max_abs_diff(&run(&off, 0)?) > 0.0);
    Ok(o)
}

// ---------------------------------------------------------------- cli

fn cli_run_metadata() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut cfg = RunConfig::default();
    cfg.train.seed = 77;
    cfg.model.use_rope_on_ssd = false;
    let meta = RunMetadata::new("train", &cfg, Precision::F64, 1);
    let json = serde_json::to_value(&meta)?;
    for key in ["command", "config", "seed", "fp_mode", "workers", "build_id"] {
        o.check(json.get(key).is_some());
    }
    let back: RunMetadata = serde_json::from_value(json)?;
    o.check(back.config == cfg && back.seed == 77);
    Ok(o)
}

/// Invariant names the registry must cover one-to-one.
pub const REQUIRED_PROPERTIES: &[&str] = &[
    "tensor.matmul_associativity",
    "tensor.softmax_rows_stochastic",
    "rng.stream_reproducible",
    "autodiff.finite_differences",
    "autodiff.independent_param_zero_grad",
    "rope.norm_preservation",
    "rope.composition",
    "rope.shift_invariance",
    "rope.identity_at_zero",
    "rope.role_uniformity",
    "ssd.three_form_equivalence",
    "ssd.attention_duality",
    "ssd.causality",
    "ssd.decay_monotonicity",
    "ssd.recurrent_constant_state",
    "attention.causality",
    "attention.softmax_rows_sum_to_one",
    "attention.linear_recurrent_equivalence",
    "attention.permutation_sensitivity",
    "blocks.zero_projection_identity",
    "blocks.cache_consistency",
    "blocks.pattern_enforced",
    "blocks.rmsnorm_bounded",
    "lm.causality",
    "lm.cache_consistency",
    "lm.untrained_loss_ln_vocab",
    "lm.ablation_isolated_to_ss",
    "cli.run_metadata",
    "cli.verify_coverage",
];

fn cli_verify_coverage() -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let names: std::collections::HashSet<_> = PROPERTY_NAMES.iter().collect();
    o.check(names.len() == PROPERTY_NAMES.len());
    for req in REQUIRED_PROPERTIES {
        o.check(names.contains(req));
    }
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_cover_requirements() {
        assert!(cli_verify_coverage().unwrap().passed());
        assert_eq!(registry().len(), PROPERTY_NAMES.len());
    }

    #[test]
    fn filter_selects_module() {
        let reports = run(Some("rope."));
        assert!(!reports.is_empty());
        assert!(reports.iter().all(|r| r.name.starts_with("rope.")));
        assert!(reports.iter().all(|r| r.passed), "{reports:?}");
    }

    #[test]
    fn outcome_nan_fails() {
        let mut o = Outcome::new(1.0);
        o.record(f64::NAN);
        assert!(!o.passed());
        assert!(!Outcome::new(1.0).passed());
    }
}
