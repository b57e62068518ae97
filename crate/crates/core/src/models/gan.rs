use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{parse_layers, render_layers, BoundParams, LayerSpec, Mode, NetForward, Network};
use super::{LatentSpec, ModelError, LOG_VARIANCE_CAP, VARIANCE_FLOOR};
use crate::autograd::{BatchStats, Graph, NodeId};
use crate::derive_seed;
use crate::params::ParamRole;

const GEN_STREAM: u64 = 0x0067_656e;
const DISC_STREAM: u64 = 0x0064_6973;
const Q_STREAM: u64 = 0x71;

/// Declarative description of the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct GanArchitecture {
    pub latent: LatentSpec,
    /// Per-example image shape, `[channels, height, width]`.
    pub image_shape: Vec<usize>,
    pub generator: Vec<LayerSpec>,
    pub discriminator: Vec<LayerSpec>,
    /// Index of the discriminator layer whose output feeds Q.
    pub tap: usize,
    pub q: Vec<LayerSpec>,
}

impl GanArchitecture {
    /// 28×28 grayscale: three transposed convolutions in G, three convolutions
    /// in D with the tap after the second, four convolutions in Q.
    pub fn mnist() -> Self {
        let latent = LatentSpec::mnist();
        let k = latent.q_output_dim();
        Self {
            latent,
            image_shape: vec![1, 28, 28],
            generator: parse_layers(
                "deconv:64:7:1:0,bn,relu,deconv:32:4:2:1,bn,relu,deconv:1:4:2:1,bn,ssigmoid",
            )
            .expect("static layers"),
            discriminator: parse_layers(
                "conv:32:4:2:1,bnx,lrelu:0.2,conv:32:4:2:1,bnx,lrelu:0.2,conv:1:7:1:0,sigmoid",
            )
            .expect("static layers"),
            tap: 5,
            q: parse_layers(&format!(
                "conv:32:3:1:1,bn,lrelu:0.2,conv:32:3:2:1,bn,lrelu:0.2,conv:32:3:1:1,bn,lrelu:0.2,conv:{k}:4:1:0"
            ))
            .expect("static layers"),
        }
    }

    /// 8×8 images and widths of at most 8, for gradient checks.
    pub fn tiny() -> Self {
        let latent = LatentSpec {
            noise_dim: 3,
            discrete: vec![3],
            continuous: 2,
            prior: super::ContinuousPrior::Uniform,
        };
        let k = latent.q_output_dim();
        Self {
            latent,
            image_shape: vec![1, 8, 8],
            generator: parse_layers(
                "deconv:8:2:1:0,bn,relu,deconv:4:4:2:1,bn,relu,deconv:1:4:2:1,bn,ssigmoid",
            )
            .expect("static layers"),
            discriminator: parse_layers(
                "conv:4:4:2:1,bnx,lrelu:0.2,conv:8:4:2:1,bnx,lrelu:0.2,conv:1:2:1:0,sigmoid",
            )
            .expect("static layers"),
            tap: 5,
            q: parse_layers(&format!("conv:8:3:1:1,bn,lrelu:0.2,conv:{k}:2:1:0")).expect("static layers"),
        }
    }

    /// Builds all three networks, checking every shape contract.
    pub fn build(&self, seed: u64) -> Result<GanTriple, ModelError> {
        self.latent.validate()?;
        let generator = Network::new(
            ParamRole::Generator,
            vec![self.latent.input_dim()],
            self.generator.clone(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, GEN_STREAM)),
        )?;
        if generator.output_shape() != self.image_shape.as_slice() {
            return Err(ModelError::Config(format!(
                "generator produces {:?}, images are {:?}",
                generator.output_shape(),
                self.image_shape
            )));
        }
        let discriminator = Network::new(
            ParamRole::Discriminator,
            self.image_shape.clone(),
            self.discriminator.clone(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, DISC_STREAM)),
        )?;
        if discriminator.output_shape().iter().product::<usize>() != 1 {
            return Err(ModelError::Config(format!(
                "discriminator must produce one probability per image, got {:?}",
                discriminator.output_shape()
            )));
        }
        if !matches!(self.discriminator.last(), Some(LayerSpec::Sigmoid)) {
            return Err(ModelError::Config("discriminator must end in sigmoid".into()));
        }
        if self.tap + 1 >= self.discriminator.len() {
            return Err(ModelError::Config(format!(
                "tap index {} must precede the last discriminator layer",
                self.tap
            )));
        }
        let q = Network::new(
            ParamRole::QHead,
            discriminator.layer_shape(self.tap).to_vec(),
            self.q.clone(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, Q_STREAM)),
        )?;
        let k = self.latent.q_output_dim();
        if q.output_shape().iter().product::<usize>() != k || q.output_shape()[0] != k {
            return Err(ModelError::Config(format!(
                "Q produces {:?}, the latent spec needs {k} values per example",
                q.output_shape()
            )));
        }
        Ok(GanTriple {
            arch: self.clone(),
            generator,
            discriminator,
            q,
        })
    }

    pub fn render_layers(&self) -> [String; 3] {
        [
            render_layers(&self.generator),
            render_layers(&self.discriminator),
            render_layers(&self.q),
        ]
    }
}

/// θ_g, θ_d and θ_q together with the architecture that shapes them.
#[derive(Debug, Clone)]
pub struct GanTriple {
    pub arch: GanArchitecture,
    pub generator: Network,
    pub discriminator: Network,
    pub q: Network,
}

impl GanTriple {
    /// Per-example shape of the features handed to Q.
    pub fn feature_shape(&self) -> &[usize] {
        self.discriminator.layer_shape(self.arch.tap)
    }

    /// Byte size of shipping all three parameter sets once.
    pub fn full_model_bytes(&self) -> usize {
        self.generator.params().encoded_len()
            + self.discriminator.params().encoded_len()
            + self.q.params().encoded_len()
    }
}

/// Realness probabilities `[m]` and tapped features `[m, ...]`.
#[derive(Debug, Clone)]
pub struct DiscriminatorOut {
    pub probs: NodeId,
    pub features: NodeId,
}

pub fn generator_forward(
    g: &Network,
    graph: &mut Graph,
    bound: &BoundParams,
    latent: NodeId,
    mode: Mode,
) -> Result<NetForward, ModelError> {
    g.forward(graph, bound, latent, mode)
}

pub fn discriminator_forward(
    d: &Network,
    graph: &mut Graph,
    bound: &BoundParams,
    images: NodeId,
    tap: usize,
) -> Result<DiscriminatorOut, ModelError> {
    let out = d.forward(graph, bound, images, Mode::Train)?;
    let m = graph.value(images).shape()[0];
    let probs = graph.reshape(out.output(), vec![m])?;
    Ok(DiscriminatorOut {
        probs,
        features: out.layer_outputs[tap],
    })
}

/// Runs Q on `features` and packs `[logits | means | variances]` into one `[m, K]` node.
///
/// Variance is `exp` of the raw output, capped at `exp(40)` and floored at 1e-6.
pub fn q_forward(
    q: &Network,
    graph: &mut Graph,
    bound: &BoundParams,
    features: NodeId,
    spec: &LatentSpec,
    mode: Mode,
) -> Result<(NodeId, Vec<(usize, BatchStats)>), ModelError> {
    let out = q.forward(graph, bound, features, mode)?;
    let m = graph.value(features).shape()[0];
    let k = spec.q_output_dim();
    let raw = graph.reshape(out.output(), vec![m, k])?;
    if spec.continuous == 0 {
        return Ok((raw, out.stats));
    }
    let head = spec.discrete_total() + spec.continuous;
    let front = graph.slice_cols(raw, 0, head)?;
    let log_var = graph.slice_cols(raw, head, spec.continuous)?;
    let capped = graph.clamp(log_var, f64::NEG_INFINITY, LOG_VARIANCE_CAP)?;
    let var = graph.exp(capped)?;
    let floored = graph.clamp(var, VARIANCE_FLOOR, f64::INFINITY)?;
    let packed = graph.concat_cols(&[front, floored])?;
    Ok((packed, out.stats))
}
