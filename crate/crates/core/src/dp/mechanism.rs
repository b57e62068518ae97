use rand::Rng;
use rand_distr::StandardNormal;

use super::DpError;
use crate::tensor::l2_norm;

/// Noise scale σ_n = 2·p·√(I_d·ln(1/δ)) / ε with sampling probability p = n/N.
pub fn noise_scale(
    epsilon: f64,
    delta: f64,
    batch_size: usize,
    dataset_size: usize,
    d_iters: u32,
) -> Result<f64, DpError> {
    if !(epsilon > 0.0) {
        return Err(DpError::Domain {
            name: "epsilon",
            value: epsilon,
            domain: "ε > 0",
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DpError::Domain {
            name: "delta",
            value: delta,
            domain: "0 < δ < 1",
        });
    }
    if batch_size == 0 || batch_size > dataset_size {
        return Err(DpError::Domain {
            name: "batch_size",
            value: batch_size as f64,
            domain: "1 ≤ n ≤ N",
        });
    }
    if d_iters == 0 {
        return Err(DpError::Domain {
            name: "d_iters",
            value: 0.0,
            domain: "I_d ≥ 1",
        });
    }
    let p = batch_size as f64 / dataset_size as f64;
    Ok(2.0 * p * (d_iters as f64 * (1.0 / delta).ln()).sqrt() / epsilon)
}

/// Every symbol of the noise calibration, with σ_n derived once at construction.
///
/// `epsilon = ∞` yields σ_n = 0 (no noise); `clip_norm = ∞` disables clipping.
/// The two may only be combined with each other: infinite clipping with
/// positive noise would need infinite noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub d_iters: u32,
    sigma_n: f64,
}

impl PrivacyParams {
    pub fn new(
        epsilon: f64,
        delta: f64,
        clip_norm: f64,
        batch_size: usize,
        dataset_size: usize,
        d_iters: u32,
    ) -> Result<Self, DpError> {
        let sigma_n = noise_scale(epsilon, delta, batch_size, dataset_size, d_iters)?;
        if !(clip_norm > 0.0) {
            return Err(DpError::Domain {
                name: "clip_norm",
                value: clip_norm,
                domain: "C_p > 0",
            });
        }
        if clip_norm.is_infinite() && sigma_n > 0.0 {
            return Err(DpError::Domain {
                name: "clip_norm",
                value: clip_norm,
                domain: "C_p finite whenever σ_n > 0",
            });
        }
        Ok(Self {
            epsilon,
            delta,
            clip_norm,
            batch_size,
            dataset_size,
            d_iters,
            sigma_n,
        })
    }

    /// Clipping and noise both switched off.
    pub fn disabled(batch_size: usize, dataset_size: usize) -> Result<Self, DpError> {
        Self::new(f64::INFINITY, 1e-5, f64::INFINITY, batch_size, dataset_size, 1)
    }

    /// Same targets, recalibrated for a dataset of `n` examples.
    pub fn with_dataset_size(&self, n: usize) -> Result<Self, DpError> {
        Self::new(self.epsilon, self.delta, self.clip_norm, self.batch_size, n, self.d_iters)
    }

    pub fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    pub fn sampling_probability(&self) -> f64 {
        self.batch_size as f64 / self.dataset_size as f64
    }

    pub fn is_noised(&self) -> bool {
        self.sigma_n > 0.0
    }
}

/// Rescales `grad` to L2 norm `clip_norm` when it is longer; otherwise returns it untouched.
pub fn clip_gradient(grad: &[f64], clip_norm: f64) -> Result<Vec<f64>, DpError> {
    if !(clip_norm > 0.0) {
        return Err(DpError::Domain {
            name: "clip_norm",
            value: clip_norm,
            domain: "C_p > 0",
        });
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(DpError::NonFinite);
    }
    let norm = l2_norm(grad);
    if norm <= clip_norm {
        return Ok(grad.to_vec());
    }
    let factor = clip_norm / norm;
    Ok(grad.iter().map(|v| v * factor).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Privatized {
    pub gradient: Vec<f64>,
    pub pre_clip_norms: Vec<f64>,
    pub post_clip_norms: Vec<f64>,
}

/// Clips each per-example gradient, averages, then adds `(1/m)·ξ` with
/// `ξ ~ N(0, σ_n²·C_p²·I)`.
///
/// The noise draw consumes exactly `dim` standard normals from `rng`; when
/// σ_n = 0 nothing is drawn.
pub fn privatize_gradients<R: Rng + ?Sized>(
    per_example: &[Vec<f64>],
    clip_norm: f64,
    sigma_n: f64,
    rng: &mut R,
) -> Result<Privatized, DpError> {
    let first = per_example.first().ok_or(DpError::Empty)?;
    let dim = first.len();
    if let Some((index, g)) = per_example.iter().enumerate().find(|(_, g)| g.len() != dim) {
        return Err(DpError::LengthMismatch {
            index,
            expected: dim,
            actual: g.len(),
        });
    }
    if !(sigma_n >= 0.0) || (sigma_n > 0.0 && !clip_norm.is_finite()) {
        return Err(DpError::Domain {
            name: "sigma_n",
            value: sigma_n,
            domain: "σ_n ≥ 0, and C_p finite when σ_n > 0",
        });
    }
    let m = per_example.len() as f64;
    let mut sum = vec![0.0; dim];
    let mut pre = Vec::with_capacity(per_example.len());
    let mut post = Vec::with_capacity(per_example.len());
    for g in per_example {
        pre.push(l2_norm(g));
        let clipped = clip_gradient(g, clip_norm)?;
        post.push(l2_norm(&clipped));
        for (s, v) in sum.iter_mut().zip(&clipped) {
            *s += v;
        }
    }
    let mut gradient: Vec<f64> = sum.into_iter().map(|s| s / m).collect();
    if sigma_n > 0.0 {
        let std = sigma_n * clip_norm;
        for v in gradient.iter_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *v += xi * std / m;
        }
    }
    Ok(Privatized {
        gradient,
        pre_clip_norms: pre,
        post_clip_norms: post,
    })
}
