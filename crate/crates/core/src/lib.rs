//! Differentially private InfoGAN training.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`params`], [`optim`]: a small reverse-mode
//!   engine with the layers the networks need, named parameter sets and Adam.
//! * [`dp`]: noise calibration, the clip/average/noise pipeline, and a Rényi
//!   budget ledger.
//! * [`models`]: generator, discriminator with a feature tap, Q head, losses.
//! * [`trainer`]: one client's training step and loop.
//! * [`dist`]: several clients sharing one Q network over a framed wire protocol.
//! * [`data`]: IDX ingestion, disjoint partitioning, synthetic shapes.

pub mod autograd;
pub mod data;
pub mod dist;
pub mod dp;
pub mod models;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use tensor::Tensor;

/// SplitMix64 finalizer over `seed` mixed with a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of client `index` (0-based). Client 0 keeps the run seed.
pub fn client_seed(seed: u64, index: usize) -> u64 {
    if index == 0 {
        seed
    } else {
        derive_seed(seed, 0xC11E_0000 + index as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds() {
        assert_eq!(client_seed(42, 0), 42);
        assert_ne!(client_seed(42, 1), client_seed(42, 2));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
    }
}
