use std::collections::BTreeSet;

use infogan_dp::data::{
    denormalize, encode_idx_images, normalize, parse_idx, partition_indices, shard_dataset, synth_dataset,
    DataError, DatasetSource,
};
use infogan_dp::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn idx_round_trip(n in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let raw: Vec<f64> = (0..n * h * w).map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64 * 97)) % 256) as f64).collect();
        let images = normalize(&Tensor::new(vec![n, h, w], raw.clone()).unwrap()).unwrap();
        let images = images.reshape(vec![n, 1, h, w]).unwrap();
        let parsed = parse_idx(&encode_idx_images(&images).unwrap()).unwrap();
        prop_assert_eq!(parsed.shape(), &[n, h, w]);
        prop_assert_eq!(parsed.data(), &raw[..]);
    }

    #[test]
    fn normalize_then_denormalize_is_identity(raw in prop::collection::vec(0u8..=255, 1..64)) {
        let t = Tensor::vector(raw.iter().map(|v| *v as f64).collect());
        let back = denormalize(&normalize(&t).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn partitions_are_disjoint(items in 1usize..200, clients in 1usize..8, seed in any::<u64>()) {
        let per = items / clients;
        prop_assume!(per > 0);
        let blocks = partition_indices(items, clients, per, seed).unwrap();
        let all: BTreeSet<usize> = blocks.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), clients * per);
        prop_assert!(all.iter().all(|i| *i < items));
    }
}

#[test]
fn shards_record_their_provenance() {
    let ds = synth_dataset(40, 9);
    let source = DatasetSource::Synthetic { count: 40, seed: 9 };
    let shards = shard_dataset(&ds.images, &source, 4, 10, 1).unwrap();
    assert_eq!(shards.len(), 4);
    for (i, s) in shards.iter().enumerate() {
        assert_eq!(s.len(), 10);
        assert_eq!(s.index, i);
        assert_eq!(s.provenance.indices.len(), 10);
        assert_eq!(s.images.shape(), &[10, 1, 28, 28]);
    }
    assert_eq!(synth_dataset(40, 9).images, ds.images);
}

#[test]
fn oversubscribed_partition_is_an_error() {
    assert!(matches!(partition_indices(10, 3, 4, 0), Err(DataError::Partition { .. })));
}
