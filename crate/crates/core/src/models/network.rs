//! Sequential networks built from a declarative layer list.
//!
//! Layer tokens (comma separated in configuration):
//!
//! | token               | layer                                                  |
//! |---------------------|--------------------------------------------------------|
//! | `dense:OUT`         | fully connected, flattens its input                    |
//! | `conv:OUT:K:S:P`    | K×K convolution, stride S, padding P                   |
//! | `deconv:OUT:K:S:P`  | K×K fractionally-strided convolution                   |
//! | `bn`                | batch norm, statistics over the batch                  |
//! | `bnx`               | batch norm, statistics per example (no running stats) |
//! | `relu`, `lrelu:A`   | rectifiers                                             |
//! | `sigmoid`           | logistic                                               |
//! | `ssigmoid`          | `2·sigmoid(x) − 1`, range (−1, 1)                      |
//!
//! A rank-1 input is viewed as `C×1×1` by convolutional layers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Normal;

use super::ModelError;
use crate::autograd::{BatchStats, Graph, LeafTag, NodeId, NormGroup};
use crate::autograd::kernels::{conv_out_extent, conv_transpose_out_extent};
use crate::params::{ParamRole, ParamSet};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense { out: usize },
    Conv { out: usize, kernel: usize, stride: usize, pad: usize },
    Deconv { out: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm { group: NormGroup },
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    SignedSigmoid,
}

impl LayerSpec {
    fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. }
                | LayerSpec::Conv { .. }
                | LayerSpec::Deconv { .. }
                | LayerSpec::BatchNorm { .. }
        )
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { out } => write!(f, "dense:{out}"),
            LayerSpec::Conv { out, kernel, stride, pad } => {
                write!(f, "conv:{out}:{kernel}:{stride}:{pad}")
            }
            LayerSpec::Deconv { out, kernel, stride, pad } => {
                write!(f, "deconv:{out}:{kernel}:{stride}:{pad}")
            }
            LayerSpec::BatchNorm { group: NormGroup::Batch } => write!(f, "bn"),
            LayerSpec::BatchNorm { group: NormGroup::PerExample } => write!(f, "bnx"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::LeakyRelu { slope } => write!(f, "lrelu:{slope}"),
            LayerSpec::Sigmoid => write!(f, "sigmoid"),
            LayerSpec::SignedSigmoid => write!(f, "ssigmoid"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || ModelError::Config(format!("bad layer token `{s}`"));
        let num = |i: usize| -> Result<usize, ModelError> {
            parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad())
        };
        let conv_fields = || -> Result<(usize, usize, usize, usize), ModelError> {
            if parts.len() != 5 {
                return Err(bad());
            }
            Ok((num(1)?, num(2)?, num(3)?, num(4)?))
        };
        let layer = match parts[0] {
            "dense" if parts.len() == 2 => LayerSpec::Dense { out: num(1)? },
            "conv" => {
                let (out, kernel, stride, pad) = conv_fields()?;
                LayerSpec::Conv { out, kernel, stride, pad }
            }
            "deconv" => {
                let (out, kernel, stride, pad) = conv_fields()?;
                LayerSpec::Deconv { out, kernel, stride, pad }
            }
            "bn" if parts.len() == 1 => LayerSpec::BatchNorm { group: NormGroup::Batch },
            "bnx" if parts.len() == 1 => LayerSpec::BatchNorm { group: NormGroup::PerExample },
            "relu" if parts.len() == 1 => LayerSpec::Relu,
            "lrelu" if parts.len() == 2 => LayerSpec::LeakyRelu {
                slope: parts[1].parse().map_err(|_| bad())?,
            },
            "sigmoid" if parts.len() == 1 => LayerSpec::Sigmoid,
            "ssigmoid" if parts.len() == 1 => LayerSpec::SignedSigmoid,
            _ => return Err(bad()),
        };
        Ok(layer)
    }
}

pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>, ModelError> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

pub fn render_layers(layers: &[LayerSpec]) -> String {
    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

/// Whether batch-norm layers use batch statistics or their running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct LayerSlots {
    /// Indices into the parameter set (weight, bias) or (gamma, beta).
    params: Option<(usize, usize)>,
    /// Indices into the buffer set (running mean, running var).
    buffers: Option<(usize, usize)>,
}

/// A sequential network with its parameters and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    slots: Vec<LayerSlots>,
    params: ParamSet,
    buffers: ParamSet,
}

/// Parameter leaves of one network on one tape, aligned with its [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn grads(&self, graph: &Graph) -> Vec<Vec<f64>> {
        self.ids.iter().map(|&id| graph.grad(id)).collect()
    }

    pub fn flat_grad(&self, graph: &Graph) -> Vec<f64> {
        self.ids.iter().flat_map(|&id| graph.grad(id)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct NetForward {
    /// Output node of every layer, in order.
    pub layer_outputs: Vec<NodeId>,
    /// Statistics seen by batch-statistic layers in training mode.
    pub stats: Vec<(usize, BatchStats)>,
}

impl NetForward {
    pub fn output(&self) -> NodeId {
        *self.layer_outputs.last().expect("network has layers")
    }
}

impl Network {
    /// Builds the network, inferring every intermediate shape and drawing
    /// weights from N(0, 0.02²). Biases and β start at 0, γ at 1.
    pub fn new<R: Rng + ?Sized>(
        role: ParamRole,
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Config(format!("{} network has no layers", role.prefix())));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(ModelError::Config(format!("bad input shape {input_shape:?}")));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let prefix = role.prefix();
        let mut params = ParamSet::new(role);
        let mut buffers = ParamSet::new(role);
        let mut shapes = Vec::with_capacity(layers.len());
        let mut slots = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            let err = |detail: String| ModelError::Shape(format!("{prefix} layer {i} ({layer}): {detail}"));
            let mut slot = LayerSlots { params: None, buffers: None };
            let mut init = |name: &str, shape: Vec<usize>, gaussian: bool, fill: f64| -> usize {
                let n: usize = shape.iter().product();
                let data = if gaussian {
                    (0..n).map(|_| rng.sample(normal)).collect()
                } else {
                    vec![fill; n]
                };
                params
                    .insert(format!("{prefix}.{i}.{name}"), Tensor::new(shape, data).expect("param shape"))
                    .expect("unique name");
                params.len() - 1
            };
            let next = match *layer {
                LayerSpec::Dense { out } => {
                    let inp: usize = cur.iter().product();
                    if out == 0 {
                        return Err(err("zero outputs".into()));
                    }
                    let w = init("weight", vec![out, inp], true, 0.0);
                    let b = init("bias", vec![out], false, 0.0);
                    slot.params = Some((w, b));
                    vec![out]
                }
                LayerSpec::Conv { out, kernel, stride, pad }
                | LayerSpec::Deconv { out, kernel, stride, pad } => {
                    let (c, h, w) = as_chw(&cur).ok_or_else(|| err(format!("input {cur:?} is not C×H×W")))?;
                    let transposed = matches!(layer, LayerSpec::Deconv { .. });
                    if out == 0 || kernel == 0 {
                        return Err(err("zero channels or kernel".into()));
                    }
                    let extent = |x| {
                        if transposed {
                            conv_transpose_out_extent(x, kernel, stride, pad)
                        } else {
                            conv_out_extent(x, kernel, stride, pad)
                        }
                    };
                    let (oh, ow) = match (extent(h), extent(w)) {
                        (Some(oh), Some(ow)) => (oh, ow),
                        _ => {
                            return Err(err(format!(
                                "input {c}×{h}×{w}, kernel {kernel}, stride {stride}, padding {pad} gives a non-integral output size"
                            )))
                        }
                    };
                    let wshape = if transposed {
                        vec![c, out, kernel, kernel]
                    } else {
                        vec![out, c, kernel, kernel]
                    };
                    let wi = init("weight", wshape, true, 0.0);
                    let bi = init("bias", vec![out], false, 0.0);
                    slot.params = Some((wi, bi));
                    vec![out, oh, ow]
                }
                LayerSpec::BatchNorm { group } => {
                    let channels = cur[0];
                    let g = init("gamma", vec![channels], false, 1.0);
                    let b = init("beta", vec![channels], false, 0.0);
                    slot.params = Some((g, b));
                    if group == NormGroup::Batch {
                        buffers
                            .insert(format!("{prefix}.{i}.running_mean"), Tensor::zeros(vec![channels]))
                            .expect("unique");
                        buffers
                            .insert(format!("{prefix}.{i}.running_var"), Tensor::full(vec![channels], 1.0))
                            .expect("unique");
                        slot.buffers = Some((buffers.len() - 2, buffers.len() - 1));
                    } else if cur.len() == 1 {
                        return Err(err("per-example statistics need spatial positions".into()));
                    }
                    cur.clone()
                }
                LayerSpec::Relu
                | LayerSpec::LeakyRelu { .. }
                | LayerSpec::Sigmoid
                | LayerSpec::SignedSigmoid => cur.clone(),
            };
            debug_assert_eq!(slot.params.is_some(), layer.has_params());
            shapes.push(next.clone());
            slots.push(slot);
            cur = next;
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            slots,
            params,
            buffers,
        })
    }

    pub fn role(&self) -> ParamRole {
        self.params.role()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-example output shape of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("layers")
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamSet {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamSet {
        &mut self.buffers
    }

    /// Parameters followed by buffers, as written to checkpoints.
    pub fn state(&self) -> ParamSet {
        let mut all = self.params.clone();
        for (n, t) in self.buffers.iter() {
            all.insert(n, t.clone()).expect("buffer names differ from parameter names");
        }
        all
    }

    /// Loads a checkpoint produced by [`Network::state`]; every entry must match by name and shape.
    pub fn load_state(&mut self, state: &ParamSet) -> Result<(), ModelError> {
        let expected = self.params.len() + self.buffers.len();
        if state.len() != expected {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} entries, network expects {expected}",
                state.len()
            )));
        }
        for (name, t) in state.iter() {
            let target = if self.params.get(name).is_some() {
                &mut self.params
            } else {
                &mut self.buffers
            };
            match target.get(name) {
                Some(cur) if cur.shape() == t.shape() => target.set(name, t.data())?,
                Some(cur) => {
                    return Err(ModelError::Checkpoint(format!(
                        "`{name}` has shape {:?}, network expects {:?}",
                        t.shape(),
                        cur.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("unexpected entry `{name}`"))),
            }
        }
        Ok(())
    }

    pub fn bind(&self, graph: &mut Graph, tag: LeafTag, requires_grad: bool) -> BoundParams {
        BoundParams {
            ids: self
                .params
                .tensors()
                .map(|t| graph.leaf(t.clone(), tag, requires_grad))
                .collect(),
        }
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        input: NodeId,
        mode: Mode,
    ) -> Result<NetForward, ModelError> {
        let in_shape = graph.value(input).shape().to_vec();
        if in_shape.len() != self.input_shape.len() + 1 || in_shape[1..] != self.input_shape[..] {
            return Err(ModelError::Shape(format!(
                "{} network expects [batch, {:?}], got {in_shape:?}",
                self.role().prefix(),
                self.input_shape
            )));
        }
        let batch = in_shape[0];
        let mut x = input;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let slot = &self.slots[i];
            x = match *layer {
                LayerSpec::Dense { .. } => {
                    let flat: usize = graph.value(x).shape()[1..].iter().product();
                    if graph.value(x).rank() != 2 {
                        x = graph.reshape(x, vec![batch, flat])?;
                    }
                    let (w, b) = slot.params.expect("dense params");
                    graph.dense(x, bound.ids[w], bound.ids[b])?
                }
                LayerSpec::Conv { stride, pad, .. } | LayerSpec::Deconv { stride, pad, .. } => {
                    if graph.value(x).rank() == 2 {
                        let c = graph.value(x).shape()[1];
                        x = graph.reshape(x, vec![batch, c, 1, 1])?;
                    }
                    let (w, b) = slot.params.expect("conv params");
                    if matches!(layer, LayerSpec::Conv { .. }) {
                        graph.conv2d(x, bound.ids[w], bound.ids[b], stride, pad)?
                    } else {
                        graph.conv_transpose2d(x, bound.ids[w], bound.ids[b], stride, pad)?
                    }
                }
                LayerSpec::BatchNorm { group } => {
                    let (g, b) = slot.params.expect("bn params");
                    match (group, mode, slot.buffers) {
                        (NormGroup::Batch, Mode::Eval, Some((rm, rv))) => graph.batch_norm_frozen(
                            x,
                            bound.ids[g],
                            bound.ids[b],
                            self.buffers.tensor_at(rm).data(),
                            self.buffers.tensor_at(rv).data(),
                            BN_EPS,
                        )?,
                        _ => {
                            let (y, s) =
                                graph.batch_norm(x, bound.ids[g], bound.ids[b], BN_EPS, group)?;
                            if group == NormGroup::Batch {
                                stats.push((i, s));
                            }
                            y
                        }
                    }
                }
                LayerSpec::Relu => graph.relu(x)?,
                LayerSpec::LeakyRelu { slope } => graph.leaky_relu(x, slope)?,
                LayerSpec::Sigmoid => graph.sigmoid(x)?,
                LayerSpec::SignedSigmoid => {
                    let s = graph.sigmoid(x)?;
                    let s2 = graph.scale(s, 2.0)?;
                    graph.add_scalar(s2, -1.0)?
                }
            };
            outputs.push(x);
        }
        Ok(NetForward {
            layer_outputs: outputs,
            stats,
        })
    }

    /// Folds observed batch statistics into the running averages.
    pub fn commit_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            let Some((rm, rv)) = self.slots[*layer].buffers else {
                continue;
            };
            for (buf, obs) in [(rm, &s.mean), (rv, &s.var)] {
                let t = self.buffers.tensor_at_mut(buf).data_mut();
                for (r, o) in t.iter_mut().zip(obs) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
                }
            }
        }
    }

    /// Untaped forward pass on values, for sampling and evaluation.
    pub fn evaluate(&self, input: &Tensor, mode: Mode) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, LeafTag::Constant, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &bound, x, mode)?;
        Ok(g.value(out.output()).clone())
    }
}

fn as_chw(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [c] => Some((c, 1, 1)),
        [c, h, w] => Some((c, h, w)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_tokens_round_trip() {
        let s = "deconv:64:7:1:0,bn,relu,conv:32:4:2:1,bnx,lrelu:0.2,dense:3,sigmoid,ssigmoid";
        let layers = parse_layers(s).unwrap();
        assert_eq!(render_layers(&layers), s);
        assert!(parse_layers("conv:1:2:3").is_err());
        assert!(parse_layers("tanh").is_err());
    }

    #[test]
    fn shape_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::new(
            ParamRole::Generator,
            vec![74],
            parse_layers("deconv:64:7:1:0,bn,relu,deconv:32:4:2:1,bn,relu,deconv:1:4:2:1,bn,ssigmoid").unwrap(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(net.output_shape(), &[1, 28, 28]);
        assert_eq!(net.layer_shape(0), &[64, 7, 7]);
        assert_eq!(net.params().len(), 12);
        assert_eq!(net.buffers().len(), 6);
        let names: Vec<&str> = net.params().iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "g.0.weight");
        assert_eq!(names[2], "g.1.gamma");
    }

    #[test]
    fn misconfigured_network_fails_at_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Network::new(
            ParamRole::Discriminator,
            vec![1, 7, 7],
            parse_layers("conv:4:4:2:0").unwrap(),
            &mut rng,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1×7×7") && msg.contains("kernel 4"), "{msg}");
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::new(ParamRole::QHead, vec![3], vec![LayerSpec::Dense { out: 2 }], &mut rng).unwrap();
        let mut g = Graph::new();
        let b = net.bind(&mut g, LeafTag::QHead, true);
        let x = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(net.forward(&mut g, &b, x, Mode::Train), Err(ModelError::Shape(_))));
    }

    #[test]
    fn state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::new(ParamRole::Generator, vec![2], parse_layers("dense:3,bn,relu").unwrap(), &mut rng).unwrap();
        let mut other = Network::new(ParamRole::Generator, vec![2], parse_layers("dense:3,bn,relu").unwrap(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        other.load_state(&net.state()).unwrap();
        assert!(other.params().bitwise_eq(net.params()));
        let wrong = Network::new(ParamRole::Generator, vec![2], parse_layers("dense:4,bn,relu").unwrap(), &mut rng).unwrap();
        assert!(other.load_state(&wrong.state()).is_err());
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::new(ParamRole::Generator, vec![2], parse_layers("dense:2,bn").unwrap(), &mut rng).unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        // Fresh running stats are (0, 1): eval output equals the dense output / sqrt(1 + eps).
        let dense_only = Network::evaluate(&net, &x, Mode::Eval).unwrap();
        let mut g = Graph::new();
        let b = net.bind(&mut g, LeafTag::Constant, false);
        let xi = g.constant(x.clone());
        let f = net.forward(&mut g, &b, xi, Mode::Train).unwrap();
        let pre = g.value(f.layer_outputs[0]).clone();
        for (a, p) in dense_only.data().iter().zip(pre.data()) {
            assert!((a - p / (1.0 + BN_EPS).sqrt()).abs() < 1e-15);
        }
        net.commit_stats(&f.stats);
        let rm = net.buffers().tensor_at(0).data().to_vec();
        let mean0 = (pre.data()[0] + pre.data()[2]) / 2.0;
        assert!((rm[0] - BN_MOMENTUM * mean0).abs() < 1e-15);
    }
}
