//! Unified rotary position embedding for attention and state-space-duality
//! layers, and a hybrid language model that stacks seven SSD sub-layers per
//! attention sub-layer.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::field_reassign_with_default
)]

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod lm;
pub mod rng;
pub mod rope;
pub mod ssd;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
