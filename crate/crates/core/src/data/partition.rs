//! Seeded split of a dataset into disjoint client shards.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{DataError, DatasetShard, DatasetSource};
use crate::derive_seed;
use crate::tensor::Tensor;

const PARTITION_STREAM: u64 = 0x7061_7274;

/// Where a shard came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub parent_hash: String,
    pub seed: u64,
    /// Half-open range of the shard in the shuffled order.
    pub range: (usize, usize),
    /// Parent indices, in shard order.
    pub indices: Vec<usize>,
}

/// Hex SHA-256 over the shape and values.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Shuffles `0..items` and takes `clients` consecutive blocks of `per_client`.
pub fn partition_indices(
    items: usize,
    clients: usize,
    per_client: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    let err = DataError::Partition {
        items,
        clients,
        per_client,
    };
    match clients.checked_mul(per_client) {
        Some(total) if clients > 0 && per_client > 0 && total <= items => {}
        _ => return Err(err),
    }
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, PARTITION_STREAM)));
    Ok(order.chunks(per_client).take(clients).map(<[usize]>::to_vec).collect())
}

pub fn shard_dataset(
    images: &Tensor,
    source: &DatasetSource,
    clients: usize,
    per_client: usize,
    seed: u64,
) -> Result<Vec<DatasetShard>, DataError> {
    let parent_hash = tensor_hash(images);
    let blocks = partition_indices(images.shape()[0], clients, per_client, seed)?;
    let mut start = 0;
    Ok(blocks
        .into_iter()
        .enumerate()
        .map(|(index, indices)| {
            let range = (start, start + indices.len());
            start = range.1;
            DatasetShard {
                images: images.gather_outer(&indices),
                source: source.clone(),
                index,
                provenance: Provenance {
                    parent_hash: parent_hash.clone(),
                    seed,
                    range,
                    indices,
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn shards_carry_parent_rows() {
        let t = Tensor::new(vec![5, 1, 1, 1], vec![0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let src = DatasetSource::Synthetic { count: 5, seed: 0 };
        let shards = shard_dataset(&t, &src, 2, 2, 9).unwrap();
        assert_eq!(shards[0].len(), 2);
        assert_eq!(shards[1].provenance.range, (2, 4));
        for s in &shards {
            assert_eq!(s.provenance.parent_hash, tensor_hash(&t));
            for (row, &i) in s.provenance.indices.iter().enumerate() {
                assert_eq!(s.images.data()[row], t.data()[i]);
            }
        }
    }

    #[test]
    fn ten_by_six_thousand() {
        let blocks = partition_indices(60_000, 10, 6000, 1).unwrap();
        let set: BTreeSet<usize> = blocks.iter().flatten().copied().collect();
        assert_eq!(set.len(), 60_000);
        assert!(blocks.iter().all(|b| b.len() == 6000));
    }

    #[test]
    fn single_client_is_a_shuffled_subset() {
        let blocks = partition_indices(100, 1, 40, 2).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_ne!(blocks[0], (0..40).collect::<Vec<_>>());
        assert!(blocks[0].iter().all(|&i| i < 100));
    }

    #[test]
    fn insufficient_data() {
        assert!(partition_indices(3, 0, 1, 0).is_err());
        assert!(partition_indices(10, 3, 4, 0).is_err());
        assert!(partition_indices(10, usize::MAX, 2, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn pairwise_disjoint(items in 1usize..400, clients in 1usize..12, per in 1usize..40, seed: u64) {
            prop_assume!(clients * per <= items);
            let blocks = partition_indices(items, clients, per, seed).unwrap();
            for i in 0..blocks.len() {
                for j in i + 1..blocks.len() {
                    let a: BTreeSet<_> = blocks[i].iter().collect();
                    prop_assert!(blocks[j].iter().all(|x| !a.contains(x)));
                }
            }
            let union: BTreeSet<usize> = blocks.iter().flatten().copied().collect();
            prop_assert_eq!(union.len(), clients * per);
            prop_assert_eq!(blocks, partition_indices(items, clients, per, seed).unwrap());
        }
    }
}
