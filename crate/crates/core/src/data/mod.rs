//! Training images: IDX files, synthetic shapes, and disjoint client shards.

pub mod idx;
pub mod partition;
pub mod synth;

use std::fmt;

use thiserror::Error;

use crate::tensor::Tensor;

pub use idx::{denormalize, encode_idx_images, load_idx_images, normalize, parse_idx, parse_idx_labels, unit_to_pixel};
pub use partition::{partition_indices, shard_dataset, tensor_hash, Provenance};
pub use synth::{synth_dataset, synth_images, Shape, ShapeParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX data truncated: need {needed} bytes, have {got}")]
    Truncated { needed: u64, got: u64 },
    #[error("IDX dimensions overflow")]
    Overflow,
    #[error("value {value} at index {index} is outside {range}")]
    OutOfRange {
        index: usize,
        value: f64,
        range: &'static str,
    },
    #[error("cannot take {clients} shards of {per_client} from {items} examples")]
    Partition {
        items: usize,
        clients: usize,
        per_client: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Idx(String),
    Synthetic { count: usize, seed: u64 },
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Idx(path) => write!(f, "idx:{path}"),
            DatasetSource::Synthetic { count, seed } => write!(f, "synthetic:{count}:{seed}"),
        }
    }
}

/// One client's slice of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetShard {
    /// `[n, 1, h, w]` in `[-1, 1]`.
    pub images: Tensor,
    pub source: DatasetSource,
    pub index: usize,
    pub provenance: Provenance,
}

impl DatasetShard {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
