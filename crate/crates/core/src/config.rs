//! Model, training and benchmark settings.
//!
//! A run is described by one JSON document whose field names mirror
//! [`RunConfig`]. Missing fields take their defaults, unknown fields are
//! rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::tokenizer::VOCAB_SIZE;
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Each module holds `ss_per_module` SSD sub-layers then
    /// `sa_per_module` attention sub-layers.
    pub n_modules: usize,
    pub n_heads: usize,
    /// SSD state size per head; also the rotary dimension of B and C.
    pub d_state: usize,
    pub chunk_len: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub rope_base: f64,
    /// Multiply rotated queries and C vectors by `max(1, log_base(m + 1))`.
    pub long_position_scaling: bool,
    pub log_scale_base: u64,
    /// Rotate B and C in the SSD sub-layers. Off is the ablation.
    pub use_rope_on_ssd: bool,
    pub ss_per_module: usize,
    pub sa_per_module: usize,
    pub ffn_mult: usize,
    pub rms_eps: f64,
    /// Initial decay logit; `sigmoid(3) ≈ 0.95`.
    pub decay_bias_init: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            n_modules: 2,
            n_heads: 2,
            d_state: 128,
            chunk_len: 256,
            vocab_size: VOCAB_SIZE,
            max_position: 4096,
            rope_base: crate::rope::DEFAULT_BASE,
            long_position_scaling: false,
            log_scale_base: 256,
            use_rope_on_ssd: true,
            ss_per_module: 7,
            sa_per_module: 1,
            ffn_mult: 4,
            rms_eps: 1e-6,
            decay_bias_init: 3.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the CLI and the acceptance runs.
    pub fn micro() -> Self {
        ModelConfig {
            d_model: 64,
            n_modules: 2,
            n_heads: 4,
            d_state: 16,
            chunk_len: 16,
            max_position: 1024,
            log_scale_base: 64,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn layers_per_module(&self) -> usize {
        self.ss_per_module + self.sa_per_module
    }

    pub fn n_layers(&self) -> usize {
        self.n_modules * self.layers_per_module()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("per-head dim {} must be even", self.head_dim()));
        }
        if self.d_state < 2 || !self.d_state.is_multiple_of(2) {
            return bad(format!("d_state {} must be even and >= 2", self.d_state));
        }
        if self.chunk_len == 0 {
            return bad("chunk_len must be >= 1".into());
        }
        if self.vocab_size == 0 || self.max_position == 0 {
            return bad("vocab_size and max_position must be positive".into());
        }
        if !(self.rope_base > 0.0) {
            return bad(format!("rope_base {} must be positive", self.rope_base));
        }
        if self.log_scale_base < 2 {
            return bad(format!("log_scale_base {} must be >= 2", self.log_scale_base));
        }
        if self.layers_per_module() == 0 {
            return bad("a module needs at least one sub-layer".into());
        }
        if !(self.rms_eps > 0.0) {
            return bad("rms_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Cosine floor as a fraction of `lr`.
    pub min_lr_fraction: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Wall-clock throughput in the metrics log. Off keeps logs
    /// bit-reproducible.
    pub record_timing: bool,
    /// Capacity of the data prefetch queue (0 generates inline).
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.10,
            min_lr_fraction: 0.10,
            grad_clip: 1.0,
            steps: 2000,
            batch_size: 8,
            seed: 1,
            checkpoint_every: 0,
            record_timing: false,
            prefetch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Which synthetic or file-backed data stream to train on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSpec {
    Copy,
    Needle,
    /// Raw bytes of a file, cut into windows.
    Bytes(String),
}

impl TaskSpec {
    /// Parses `copy`, `needle` or `bytes:<path>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskSpec::Copy),
            "needle" => Ok(TaskSpec::Needle),
            _ => match s.strip_prefix("bytes:") {
                Some(path) if !path.is_empty() => Ok(TaskSpec::Bytes(path.to_string())),
                _ => Err(Error::Config(format!("unknown task {s:?}; expected copy, needle or bytes:<file>"))),
            },
        }
    }
}

impl std::fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskSpec::Copy => f.write_str("copy"),
            TaskSpec::Needle => f.write_str("needle"),
            TaskSpec::Bytes(p) => write!(f, "bytes:{p}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskSpec,
    pub seq_len: usize,
    /// Distinct payload symbols in the copy task.
    pub copy_alphabet: usize,
    pub needle_len: usize,
    /// Held-out instances for validation loss/accuracy.
    pub val_instances: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { task: TaskSpec::Copy, seq_len: 32, copy_alphabet: 16, needle_len: 4, val_instances: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub modes: Vec<String>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    pub workers: usize,
    pub backward: bool,
    /// Refuse lengths whose estimated working set exceeds this many bytes.
    pub max_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            modes: vec!["attention-full".into(), "ssd-recurrent".into(), "ssd-chunked".into(), "hybrid".into()],
            lengths: vec![1024, 2048, 4096],
            batch: 1,
            warmup: 2,
            iters: 5,
            workers: 1,
            backward: false,
            max_bytes: 4 << 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::micro(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.seq_len > self.model.max_position {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_position {}",
                self.data.seq_len, self.model.max_position
            )));
        }
        Ok(())
    }
}

/// Header written next to every CLI output; enough to rerun the command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub fp_mode: Precision,
    pub workers: usize,
    pub build_id: String,
}

impl RunMetadata {
    pub fn new(command: &str, config: &RunConfig, fp_mode: Precision, workers: usize) -> Self {
        RunMetadata {
            command: command.to_string(),
            config: config.clone(),
            seed: config.train.seed,
            fp_mode,
            workers,
            build_id: build_id(),
        }
    }
}

/// Crate version and build profile, plus `UNIROPE_BUILD_ID` when set at
/// compile time.
pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    match option_env!("UNIROPE_BUILD_ID") {
        Some(id) => format!("{}-{profile}-{id}", env!("CARGO_PKG_VERSION")),
        None => format!("{}-{profile}", env!("CARGO_PKG_VERSION")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().d_state, 128);
        assert_eq!(ModelConfig::default().chunk_len, 256);
    }

    #[test]
    fn json_round_trip_and_partial_docs() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"train": {"steps": 7}}"#).unwrap();
        assert_eq!(partial.train.steps, 7);
        assert_eq!(partial.model, ModelConfig::micro());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"modle": {}}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json("[1, 2").is_err());
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut m = ModelConfig::micro();
        m.n_heads = 3;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::micro();
        m.d_state = 5;
        assert!(m.validate().is_err());
        let mut t = TrainConfig::default();
        t.warmup_fraction = 1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn task_spec_parsing() {
        assert_eq!(TaskSpec::parse("copy").unwrap(), TaskSpec::Copy);
        assert_eq!(TaskSpec::parse("bytes:/tmp/x").unwrap(), TaskSpec::Bytes("/tmp/x".into()));
        assert!(TaskSpec::parse("bytes:").is_err());
        assert!(TaskSpec::parse("cop").is_err());
        let s = TaskSpec::Bytes("a:b".into());
        assert_eq!(TaskSpec::parse(&s.to_string()).unwrap(), s);
    }
}
