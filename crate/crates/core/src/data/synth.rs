//! Synthetic shapes: bars, crosses and L-shapes at random angles and stroke widths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::partition::{tensor_hash, Provenance};
use super::{DatasetShard, DatasetSource};
use crate::derive_seed;
use crate::tensor::Tensor;

const SYNTH_STREAM: u64 = 0x7379_6e74;
const SUPERSAMPLE: usize = 3;
const ARM: f64 = 0.7;
const SHORT_ARM: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Bar,
    Cross,
    Ell,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Bar, Shape::Cross, Shape::Ell];

    /// Whether `(u, v)`, in shape coordinates over `[-1, 1]`, is ink.
    fn covers(self, u: f64, v: f64, half_width: f64) -> bool {
        let on_h = v.abs() <= half_width && u.abs() <= ARM;
        let on_v = u.abs() <= half_width && v.abs() <= SHORT_ARM;
        match self {
            Shape::Bar => on_h,
            Shape::Cross => on_h || on_v,
            Shape::Ell => {
                let stem = (u + ARM).abs() <= half_width && v.abs() <= ARM;
                let foot = (v - ARM).abs() <= half_width && u.abs() <= ARM;
                stem || foot
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    pub shape: Shape,
    /// Radians in `[0, π)`.
    pub angle: f64,
    /// Half the stroke width, in units of half the image side.
    pub half_width: f64,
}

impl ShapeParams {
    /// `side × side` pixels in `[-1, 1]`, antialiased by supersampling.
    pub fn render(&self, side: usize) -> Vec<f64> {
        let (sin, cos) = self.angle.sin_cos();
        let sub = |i: usize, s: usize| (i as f64 + (s as f64 + 0.5) / SUPERSAMPLE as f64) / side as f64 * 2.0 - 1.0;
        let mut out = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let (x, y) = (sub(col, sx), sub(row, sy));
                        let (u, v) = (cos * x + sin * y, -sin * x + cos * y);
                        hits += usize::from(self.shape.covers(u, v, self.half_width));
                    }
                }
                out.push(2.0 * hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64 - 1.0);
            }
        }
        out
    }
}

/// `count ≥ 1` images of `side × side` and the parameters that drew them.
pub fn synth_images(count: usize, side: usize, seed: u64) -> (Tensor, Vec<ShapeParams>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SYNTH_STREAM));
    let mut data = Vec::with_capacity(count * side * side);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let p = ShapeParams {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            angle: rng.random_range(0.0..std::f64::consts::PI),
            half_width: rng.random_range(0.08..0.2),
        };
        data.extend(p.render(side));
        params.push(p);
    }
    let t = Tensor::new(vec![count, 1, side, side], data).expect("count and side are positive");
    (t, params)
}

/// `count` 28×28 images as a single shard.
pub fn synth_dataset(count: usize, seed: u64) -> DatasetShard {
    let images = synth_images(count, 28, seed).0;
    DatasetShard {
        provenance: Provenance {
            parent_hash: tensor_hash(&images),
            seed,
            range: (0, count),
            indices: (0..count).collect(),
        },
        images,
        source: DatasetSource::Synthetic { count, seed },
        index: 0,
    }
}
