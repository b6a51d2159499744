//! Byte-level causal language model over the hybrid backbone.

pub mod generate;
pub mod model;
pub mod tasks;
pub mod tokenizer;
pub mod train;

pub use generate::{generate, generate_streaming, CacheTrace, Decoder, Generation};
pub use model::{logits, model_forward, LmParams, ModelCache};
pub use tasks::{make_copy_task, make_needle_task, Batch, TaskInstance, TaskSampler};
pub use train::{evaluate, init_params, lr_at, train, MetricsRecord, TrainSummary};
