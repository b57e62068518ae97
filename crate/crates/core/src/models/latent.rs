//! Generator input structure: noise z plus discrete and continuous codes.

use rand::Rng;
use rand_distr::{StandardNormal, Uniform};

use super::ModelError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContinuousPrior {
    /// Uniform on [−1, 1].
    Uniform,
    /// Standard Gaussian.
    Gaussian,
}

impl ContinuousPrior {
    pub fn name(self) -> &'static str {
        match self {
            ContinuousPrior::Uniform => "uniform",
            ContinuousPrior::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(ContinuousPrior::Uniform),
            "gaussian" => Some(ContinuousPrior::Gaussian),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSpec {
    pub noise_dim: usize,
    /// Category count of each discrete code.
    pub discrete: Vec<usize>,
    pub continuous: usize,
    pub prior: ContinuousPrior,
}

impl LatentSpec {
    /// 62 noise dimensions, one 10-way code, two uniform continuous codes.
    pub fn mnist() -> Self {
        Self {
            noise_dim: 62,
            discrete: vec![10],
            continuous: 2,
            prior: ContinuousPrior::Uniform,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim() == 0 {
            return Err(ModelError::Config("latent input is empty".into()));
        }
        if let Some(i) = self.discrete.iter().position(|&c| c < 2) {
            return Err(ModelError::Config(format!(
                "discrete code {i} needs at least 2 categories"
            )));
        }
        Ok(())
    }

    pub fn discrete_total(&self) -> usize {
        self.discrete.iter().sum()
    }

    /// Width of the generator input: z, then one-hots, then continuous values.
    pub fn input_dim(&self) -> usize {
        self.noise_dim + self.discrete_total() + self.continuous
    }

    /// Width of the packed Q output: logits, then means, then variances.
    pub fn q_output_dim(&self) -> usize {
        self.discrete_total() + 2 * self.continuous
    }

    /// Entropy H(c) of the code prior in nats; a constant of the spec.
    pub fn prior_entropy(&self) -> f64 {
        let discrete: f64 = self.discrete.iter().map(|&k| (k as f64).ln()).sum();
        let per_cont = match self.prior {
            ContinuousPrior::Uniform => 2f64.ln(),
            ContinuousPrior::Gaussian => 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln(),
        };
        discrete + per_cont * self.continuous as f64
    }
}

/// One draw of (z, c).
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSample {
    pub z: Vec<f64>,
    /// One one-hot vector per discrete code.
    pub discrete: Vec<Vec<f64>>,
    pub continuous: Vec<f64>,
}

impl CodeSample {
    pub fn category(&self, code: usize) -> usize {
        self.discrete[code]
            .iter()
            .position(|&v| v == 1.0)
            .expect("one-hot")
    }
}

/// Draws `m` samples. Per sample the rng is consumed in the order: z, each
/// discrete category, each continuous value.
pub fn sample_codes<R: Rng + ?Sized>(
    spec: &LatentSpec,
    m: usize,
    rng: &mut R,
) -> Result<Vec<CodeSample>, ModelError> {
    if m == 0 {
        return Err(ModelError::Config("batch size must be at least 1".into()));
    }
    spec.validate()?;
    let uniform = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    Ok((0..m)
        .map(|_| {
            let z = (0..spec.noise_dim).map(|_| rng.sample(StandardNormal)).collect();
            let discrete = spec
                .discrete
                .iter()
                .map(|&k| {
                    let cat = rng.random_range(0..k);
                    one_hot(cat, k)
                })
                .collect();
            let continuous = (0..spec.continuous)
                .map(|_| match spec.prior {
                    ContinuousPrior::Uniform => rng.sample(uniform),
                    ContinuousPrior::Gaussian => rng.sample(StandardNormal),
                })
                .collect();
            CodeSample {
                z,
                discrete,
                continuous,
            }
        })
        .collect())
}

pub fn one_hot(category: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[category] = 1.0;
    v
}

/// Batched view of a list of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBatch {
    pub size: usize,
    /// `[m, input_dim]`
    pub generator_input: Tensor,
    /// `[m, categories]` per discrete code.
    pub one_hots: Vec<Tensor>,
    /// `[m, continuous]`, absent when the spec has no continuous codes.
    pub continuous: Option<Tensor>,
}

impl CodeBatch {
    pub fn new(spec: &LatentSpec, samples: &[CodeSample]) -> Result<Self, ModelError> {
        let m = samples.len();
        if m == 0 {
            return Err(ModelError::Config("empty code batch".into()));
        }
        let mut input = Vec::with_capacity(m * spec.input_dim());
        for s in samples {
            if s.z.len() != spec.noise_dim
                || s.discrete.len() != spec.discrete.len()
                || s.continuous.len() != spec.continuous
                || s.discrete.iter().zip(&spec.discrete).any(|(v, &k)| v.len() != k)
            {
                return Err(ModelError::Shape(
                    "code sample does not match the latent spec".into(),
                ));
            }
            input.extend_from_slice(&s.z);
            for oh in &s.discrete {
                input.extend_from_slice(oh);
            }
            input.extend_from_slice(&s.continuous);
        }
        let one_hots = spec
            .discrete
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let data = samples.iter().flat_map(|s| s.discrete[j].iter().copied()).collect();
                Tensor::new(vec![m, k], data).expect("one-hot shape")
            })
            .collect();
        let continuous = (spec.continuous > 0).then(|| {
            let data = samples.iter().flat_map(|s| s.continuous.iter().copied()).collect();
            Tensor::new(vec![m, spec.continuous], data).expect("continuous shape")
        });
        Ok(Self {
            size: m,
            generator_input: Tensor::new(vec![m, spec.input_dim()], input)?,
            one_hots,
            continuous,
        })
    }
}

/// Q's estimate of the codes for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct QOutput {
    /// `[m, categories]` per discrete code.
    pub logits: Vec<Tensor>,
    /// `[m, continuous]`
    pub mean: Option<Tensor>,
    /// `[m, continuous]`, every entry ≥ [`super::VARIANCE_FLOOR`].
    pub variance: Option<Tensor>,
}

impl QOutput {
    /// Splits a packed `[m, logits | means | variances]` tensor.
    pub fn unpack(packed: &Tensor, spec: &LatentSpec) -> Result<Self, ModelError> {
        let k = spec.q_output_dim();
        if packed.rank() != 2 || packed.shape()[1] != k {
            return Err(ModelError::Shape(format!(
                "packed Q output {:?} does not have {k} columns",
                packed.shape()
            )));
        }
        let m = packed.shape()[0];
        let cols = |start: usize, len: usize| {
            let data = (0..m)
                .flat_map(|r| packed.data()[r * k + start..r * k + start + len].iter().copied())
                .collect();
            Tensor::new(vec![m, len], data).expect("column block")
        };
        let mut offset = 0;
        let logits = spec
            .discrete
            .iter()
            .map(|&c| {
                let t = cols(offset, c);
                offset += c;
                t
            })
            .collect();
        let n = spec.continuous;
        let (mean, variance) = if n > 0 {
            (Some(cols(offset, n)), Some(cols(offset + n, n)))
        } else {
            (None, None)
        };
        Ok(Self {
            logits,
            mean,
            variance,
        })
    }
}
