//! AdamW training with linear warmup and a cosine floor.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{ParamTree, RopeTables};
use crate::config::{ModelConfig, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::model::{batch_loss, model_forward, LmParams};
use super::tasks::{Batch, Prefetcher, TaskSampler};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// `null` unless timing was requested.
    pub tokens_per_sec: Option<f64>,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line.trim_end())?)
    }
}

/// Learning rate at `step` of `total`: linear ramp from 0 over the warmup
/// steps, then a half cosine down to `min_lr_fraction · lr` at the last step.
pub fn lr_at(tc: &TrainConfig, step: usize) -> f64 {
    let total = tc.steps;
    let warmup = (tc.warmup_fraction * total as f64).floor() as usize;
    let floor = tc.min_lr_fraction * tc.lr;
    if step < warmup {
        return tc.lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return tc.lr;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    floor + (tc.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments for every parameter, in visit order.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &LmParams<Tensor>) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, p| m.push(vec![0.0; p.len()]));
        AdamW { v: m.clone(), m, t: 0 }
    }

    /// One update with gradient scale `clip` already folded into `grads`.
    pub fn step(&mut self, params: &mut LmParams<Tensor>, grads: &[Tensor], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t);
        let bc2 = 1.0 - tc.beta2.powi(self.t);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let decay = if p.ndim() >= 2 { tc.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * g;
                v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * g * g;
                let upd = (m[j] / bc1) / ((v[j] / bc2).sqrt() + tc.adam_eps) + decay * *w;
                *w -= lr * upd;
            }
            i += 1;
        });
    }
}

/// Receives training progress.
pub trait TrainObserver {
    fn on_step(&mut self, _rec: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _params: &LmParams<Tensor>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes each record as one JSON line.
pub struct JsonlMetrics<W: Write>(pub W);

impl<W: Write> TrainObserver for JsonlMetrics<W> {
    fn on_step(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.0, "{}", rec.to_line())?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    /// Fraction of scored tokens whose argmax prediction is the target.
    pub accuracy: f64,
    pub scored: usize,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<MetricsRecord>,
    pub validation: Evaluation,
}

/// Independent streams derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const VALIDATION: u64 = 2;
}

fn collect_grads(bound: &LmParams<Var>, grads: &crate::autodiff::Gradients) -> Vec<Tensor> {
    let mut out = Vec::new();
    bound.visit("", &mut |_, v| out.push(grads.get(*v).expect("param gradient").clone()));
    out
}

/// Masked loss and argmax accuracy over `batches`, forward only.
pub fn evaluate(params: &LmParams<Tensor>, cfg: &ModelConfig, batches: &[Batch]) -> Result<Evaluation> {
    let tables = RopeTables::new(cfg)?;
    let (mut nll, mut correct, mut scored) = (0.0, 0usize, 0usize);
    for b in batches {
        let mut tape = Tape::inference();
        let bound = params.map(&mut |t| tape.constant(t.clone()));
        let logits = model_forward(&mut tape, &bound, cfg, &tables, &b.inputs, b.batch, 0, None)?;
        let lv = tape.value(logits);
        for (r, (&tgt, &m)) in b.targets.iter().zip(&b.mask).enumerate() {
            if !m {
                continue;
            }
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            nll += lse - row[tgt];
            let arg = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            correct += usize::from(arg == tgt);
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(Error::invalid("validation set has no scored tokens"));
    }
    Ok(Evaluation { loss: nll / scored as f64, accuracy: correct as f64 / scored as f64, scored })
}

/// Held-out batches drawn from the validation stream of `run`.
pub fn validation_batches(run: &RunConfig) -> Result<Vec<Batch>> {
    let mut sampler = TaskSampler::new(&run.data, Rng::new(run.train.seed).fork(streams::VALIDATION))?;
    let bs = run.train.batch_size.max(1);
    let mut left = run.data.val_instances.max(1);
    let mut out = Vec::new();
    while left > 0 {
        let n = left.min(bs);
        out.push(sampler.next_batch(n)?);
        left -= n;
    }
    Ok(out)
}

/// Fresh parameters for `run`, seeded from its init stream.
pub fn init_params(run: &RunConfig) -> Result<LmParams<Tensor>> {
    LmParams::init(&run.model, &mut Rng::new(run.train.seed).fork(streams::INIT))
}

enum Source {
    Inline(Box<TaskSampler>),
    Queue(Prefetcher),
}

impl Source {
    fn next(&mut self, bs: usize) -> Result<Batch> {
        match self {
            Source::Inline(s) => s.next_batch(bs),
            Source::Queue(q) => q.next_batch(),
        }
    }
}

/// Trains `params` in place for `run.train.steps` steps.
pub fn train(run: &RunConfig, params: &mut LmParams<Tensor>, obs: &mut dyn TrainObserver) -> Result<TrainSummary> {
    run.validate()?;
    let tc = &run.train;
    let cfg = &run.model;
    let tables = RopeTables::new(cfg)?;
    let sampler = TaskSampler::new(&run.data, Rng::new(tc.seed).fork(streams::DATA))?;
    let mut source = if tc.prefetch > 0 {
        Source::Queue(Prefetcher::spawn(sampler, tc.batch_size, tc.steps, tc.prefetch))
    } else {
        Source::Inline(Box::new(sampler))
    };
    let val = validation_batches(run)?;
    let mut opt = AdamW::new(params);
    let mut records = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let started = Instant::now();
        let batch = source.next(tc.batch_size)?;
        let mut tape = Tape::new();
        let (loss, bound) =
            batch_loss(&mut tape, params, cfg, &tables, &batch.inputs, &batch.targets, &batch.mask, batch.batch)
                .map_err(|e| match e {
                    // saturated decays and overflowing activations after updates
                    Error::NonFinite(_) | Error::InvalidArgument(_) if step > 0 => {
                        Error::Diverged { step, detail: e.to_string() }
                    }
                    e => e,
                })?;
        let loss_val = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let mut grads = collect_grads(&bound, &grads);
        drop(tape);
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !loss_val.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {loss_val}, grad norm {norm}") });
        }
        if tc.grad_clip > 0.0 && norm > tc.grad_clip {
            let s = tc.grad_clip / norm;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        let lr = lr_at(tc, step);
        opt.step(params, &grads, lr, tc);
        let tokens_per_sec = tc
            .record_timing
            .then(|| (batch.batch * batch.seq_len) as f64 / started.elapsed().as_secs_f64().max(1e-9));
        let rec = MetricsRecord { step, loss: loss_val, lr, grad_norm: norm, tokens_per_sec };
        obs.on_step(&rec)?;
        records.push(rec);
        if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 && step + 1 < tc.steps {
            obs.on_checkpoint(step + 1, params)?;
        }
    }
    obs.on_checkpoint(tc.steps, params)?;
    let validation = evaluate(params, cfg, &val)?;
    Ok(TrainSummary { records, validation })
}
