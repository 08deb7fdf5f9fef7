//! File formats and preprocessing.

pub mod formats;
pub mod partition;

pub use formats::*;
pub use partition::{partition_scene, DEFAULT_BLOCK_SIZE_M, DEFAULT_SAMPLE_COUNT};
