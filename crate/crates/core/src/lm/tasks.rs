//! Synthetic training tasks and batching.
//!
//! A [`TaskInstance`] is a token sequence of length `T + 1` plus a flag per
//! token saying whether predicting it is scored. The model sees
//! `tokens[..T]` and is trained to predict `tokens[1..]`.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::config::{DataConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::tokenizer::{BOS, QUERY, SEP};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub tokens: Vec<usize>,
    /// `scored[i]` marks `tokens[i]` as a scored prediction target.
    pub scored: Vec<bool>,
}

impl TaskInstance {
    pub fn seq_len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.seq_len()]
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.scored[1..]
    }
}

/// First symbol of the copy alphabet (`'a'`).
const COPY_BASE: usize = b'a' as usize;

/// `[BOS…, payload, SEP, payload]` of total length `T + 1`, scored on the
/// second payload. The payload is `T / 2` symbols drawn from `alphabet`
/// letters; odd `T` gets one leading `BOS`.
pub fn make_copy_task(rng: &mut Rng, t: usize, alphabet: usize) -> Result<TaskInstance> {
    let payload: Vec<usize> = (0..t / 2).map(|_| COPY_BASE + rng.below(alphabet)).collect();
    copy_instance(&payload, t)
}

/// Builds the copy layout around a given payload.
pub fn copy_instance(payload: &[usize], t: usize) -> Result<TaskInstance> {
    let need = 2 * payload.len() + 1;
    if payload.is_empty() || need > t + 1 {
        return Err(Error::invalid(format!("copy payload of {} does not fit T = {t}", payload.len())));
    }
    let pad = t + 1 - need;
    let mut tokens = vec![BOS; pad];
    tokens.extend_from_slice(payload);
    tokens.push(SEP);
    tokens.extend_from_slice(payload);
    let mut scored = vec![false; tokens.len()];
    scored[tokens.len() - payload.len()..].fill(true);
    Ok(TaskInstance { tokens, scored })
}

/// Filler is lowercase letters, the needle uppercase letters.
const FILLER_BASE: usize = b'a' as usize;
const NEEDLE_BASE: usize = b'A' as usize;

/// `[filler…, SEP, needle, filler…, QUERY, needle]` of length `T + 1`.
/// The needle start is uniform over every admissible depth.
pub fn make_needle_task(rng: &mut Rng, t: usize, needle_len: usize) -> Result<TaskInstance> {
    let (inst, _) = make_needle_task_with_depth(rng, t, needle_len)?;
    Ok(inst)
}

/// As [`make_needle_task`], also returning the depth (filler tokens before
/// the key marker).
pub fn make_needle_task_with_depth(rng: &mut Rng, t: usize, needle_len: usize) -> Result<(TaskInstance, usize)> {
    let fixed = 2 * needle_len + 2;
    if needle_len == 0 || fixed > t + 1 {
        return Err(Error::invalid(format!("needle of {needle_len} does not fit T = {t}")));
    }
    let filler = t + 1 - fixed;
    let depth = rng.below(filler + 1);
    let needle: Vec<usize> = (0..needle_len).map(|_| NEEDLE_BASE + rng.below(26)).collect();
    let mut tokens = Vec::with_capacity(t + 1);
    for _ in 0..depth {
        tokens.push(FILLER_BASE + rng.below(26));
    }
    tokens.push(SEP);
    tokens.extend_from_slice(&needle);
    for _ in depth..filler {
        tokens.push(FILLER_BASE + rng.below(26));
    }
    tokens.push(QUERY);
    tokens.extend_from_slice(&needle);
    let mut scored = vec![false; tokens.len()];
    scored[tokens.len() - needle_len..].fill(true);
    Ok((TaskInstance { tokens, scored }, depth))
}

/// Window of `T + 1` bytes at a random offset, all but the first scored.
pub fn make_bytes_window(rng: &mut Rng, data: &[u8], t: usize) -> Result<TaskInstance> {
    if data.len() < t + 1 {
        return Err(Error::invalid(format!("data file has {} bytes, need at least {}", data.len(), t + 1)));
    }
    let off = rng.below(data.len() - t);
    let tokens: Vec<usize> = data[off..off + t + 1].iter().map(|&b| b as usize).collect();
    let mut scored = vec![true; t + 1];
    scored[0] = false;
    Ok(TaskInstance { tokens, scored })
}

/// Flattened batch of equal-length instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn from_instances(items: &[TaskInstance]) -> Result<Self> {
        let t = items.first().map_or(0, TaskInstance::seq_len);
        if items.iter().any(|i| i.seq_len() != t) {
            return Err(Error::invalid("instances in a batch must share a length"));
        }
        let mut b = Batch { batch: items.len(), seq_len: t, inputs: vec![], targets: vec![], mask: vec![] };
        for it in items {
            b.inputs.extend_from_slice(it.inputs());
            b.targets.extend_from_slice(it.targets());
            b.mask.extend_from_slice(it.loss_mask());
        }
        Ok(b)
    }

    pub fn scored_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Seeded source of instances for one task.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    data: DataConfig,
    bytes: Option<Arc<Vec<u8>>>,
    rng: Rng,
}

impl TaskSampler {
    pub fn new(data: &DataConfig, rng: Rng) -> Result<Self> {
        let bytes = match &data.task {
            TaskSpec::Bytes(path) => Some(Arc::new(std::fs::read(path)?)),
            _ => None,
        };
        let s = TaskSampler { data: data.clone(), bytes, rng };
        // fail early on impossible layouts
        s.clone().next_instance()?;
        Ok(s)
    }

    pub fn next_instance(&mut self) -> Result<TaskInstance> {
        let t = self.data.seq_len;
        match &self.data.task {
            TaskSpec::Copy => make_copy_task(&mut self.rng, t, self.data.copy_alphabet.clamp(1, 26)),
            TaskSpec::Needle => make_needle_task(&mut self.rng, t, self.data.needle_len),
            TaskSpec::Bytes(_) => make_bytes_window(&mut self.rng, self.bytes.as_deref().expect("bytes loaded"), t),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Batch> {
        let items = (0..size).map(|_| self.next_instance()).collect::<Result<Vec<_>>>()?;
        Batch::from_instances(&items)
    }
}

/// Batches produced ahead of the consumer on a worker thread. The queue is
/// bounded, and the sequence of batches is identical to calling
/// [`TaskSampler::next_batch`] inline.
pub struct Prefetcher {
    rx: Receiver<Result<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(mut sampler: TaskSampler, batch_size: usize, count: usize, capacity: usize) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for _ in 0..count {
                if tx.send(sampler.next_batch(batch_size)).is_err() {
                    break;
                }
            }
        });
        Prefetcher { rx, handle: Some(handle) }
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        self.rx.recv().map_err(|_| Error::invalid("prefetch queue exhausted"))?
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // unblock the producer before joining
        let (_tx, rx) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_layout() {
        let inst = copy_instance(&[97, 98], 4).unwrap();
        assert_eq!(inst.tokens, vec![97, 98, SEP, 97, 98]);
        assert_eq!(inst.loss_mask(), &[false, false, true, true]);
        assert_eq!(inst.inputs(), &[97, 98, SEP, 97]);
        let padded = copy_instance(&[97, 98], 5).unwrap();
        assert_eq!(padded.tokens, vec![BOS, 97, 98, SEP, 97, 98]);
        assert!(copy_instance(&[97, 98, 99], 5).is_err());
    }

    #[test]
    fn copy_task_length_32() {
        let inst = make_copy_task(&mut Rng::new(1), 32, 16).unwrap();
        assert_eq!(inst.tokens.len(), 33);
        assert_eq!(inst.loss_mask().iter().filter(|&&m| m).count(), 16);
        assert_eq!(inst.tokens[16], SEP);
        assert_eq!(inst.tokens[..16], inst.tokens[17..]);
    }

    #[test]
    fn needle_layout_and_reproducibility() {
        let (a, depth) = make_needle_task_with_depth(&mut Rng::new(5), 64, 4).unwrap();
        let (b, _) = make_needle_task_with_depth(&mut Rng::new(5), 64, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 65);
        assert_eq!(a.tokens[depth], SEP);
        assert_eq!(a.tokens[60], QUERY);
        assert_eq!(a.tokens[depth + 1..depth + 5], a.tokens[61..]);
        assert_eq!(a.scored.iter().filter(|&&s| s).count(), 4);
        assert!(make_needle_task(&mut Rng::new(0), 8, 4).is_err());
    }

    #[test]
    fn prefetch_matches_inline() {
        let data = DataConfig::default();
        let sampler = TaskSampler::new(&data, Rng::new(9)).unwrap();
        let mut inline = sampler.clone();
        let mut pre = Prefetcher::spawn(sampler, 3, 5, 2);
        for _ in 0..5 {
            assert_eq!(pre.next_batch().unwrap(), inline.next_batch(3).unwrap());
        }
        assert!(pre.next_batch().is_err());
    }

    #[test]
    fn bytes_windows() {
        let data: Vec<u8> = (0..50).collect();
        let w = make_bytes_window(&mut Rng::new(2), &data, 8).unwrap();
        assert_eq!(w.tokens.len(), 9);
        assert!(w.tokens.windows(2).all(|p| p[1] == p[0] + 1));
        assert!(make_bytes_window(&mut Rng::new(2), &data[..8], 8).is_err());
    }
}
