//! Dynamic sparse training with gradual channel pruning.
//!
//! The crate bundles a small deterministic CPU training engine ([`nn`]),
//! unstructured sparse masks and DST updates ([`sparse`]), per-channel
//! statistics ([`stats`]), the channel-pruning training loop ([`chase`],
//! [`train`]), structural compaction ([`compact`]) and FLOPs/throughput
//! measurement ([`bench`]).

pub mod bench;
pub mod chase;
pub mod compact;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod sparse;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use tensor::{Scalar, Tensor};
