//! The Q network together with its optimizer and the tape of the last forward.

use super::gan::q_forward;
use super::network::{BoundParams, Mode, Network};
use super::{LatentSpec, ModelError};
use crate::autograd::{BatchStats, Graph, LeafTag, NodeId};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

struct Pending {
    graph: Graph,
    bound: BoundParams,
    features: NodeId,
    packed: NodeId,
    stats: Vec<(usize, BatchStats)>,
}

/// θ_q plus everything needed to answer one forward and its matching backward.
pub struct QHead {
    net: Network,
    spec: LatentSpec,
    adam: AdamState,
    pending: Option<Pending>,
    updates: u64,
    last_grads: Option<Vec<Vec<f64>>>,
}

impl std::fmt::Debug for QHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QHead")
            .field("updates", &self.updates)
            .field("pending", &self.pending.is_some())
            .finish()
    }
}

impl QHead {
    pub fn new(net: Network, spec: LatentSpec, adam: AdamConfig) -> Self {
        let adam = AdamState::new(adam, net.params());
        Self {
            net,
            spec,
            adam,
            pending: None,
            updates: 0,
            last_grads: None,
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Completed forward/backward pairs, each of which updated θ_q once.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// θ_q gradients of the most recent backward, before the update.
    pub fn last_grads(&self) -> Option<&[Vec<f64>]> {
        self.last_grads.as_deref()
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.net.input_shape()
    }

    /// Packed `[m, K]` estimate for `features`; the tape is kept for [`QHead::backward`].
    /// A second forward replaces the pending tape.
    pub fn forward(&mut self, features: &Tensor) -> Result<Tensor, ModelError> {
        let fs = features.shape();
        if fs.len() != self.feature_shape().len() + 1 || fs[1..] != *self.feature_shape() {
            return Err(ModelError::Shape(format!(
                "features {fs:?} do not match [batch, {:?}]",
                self.feature_shape()
            )));
        }
        let mut graph = Graph::new();
        let f = graph.leaf(features.clone(), LeafTag::Received, true);
        let bound = self.net.bind(&mut graph, LeafTag::QHead, true);
        let (packed, stats) = q_forward(&self.net, &mut graph, &bound, f, &self.spec, Mode::Train)?;
        let out = graph.value(packed).clone();
        self.pending = Some(Pending {
            graph,
            bound,
            features: f,
            packed,
            stats,
        });
        Ok(out)
    }

    /// Backpropagates `upstream = ∂loss/∂packed`, applies one Adam step to θ_q,
    /// and returns `∂loss/∂features`.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, ModelError> {
        let Some(mut p) = self.pending.take() else {
            return Err(ModelError::NoPendingForward);
        };
        let expected = p.graph.value(p.packed).shape().to_vec();
        if upstream.shape() != expected.as_slice() {
            let got = upstream.shape().to_vec();
            self.pending = Some(p);
            return Err(ModelError::Shape(format!(
                "upstream gradient {got:?} does not match Q output {expected:?}"
            )));
        }
        p.graph.backward_with_seeds(&[(p.packed, upstream.data())])?;
        let grads = p.bound.grads(&p.graph);
        let dfeat = p.graph.take_grad(p.features);
        adam_step(self.net.params_mut(), &grads, &mut self.adam)?;
        self.net.commit_stats(&p.stats);
        self.updates += 1;
        self.last_grads = Some(grads);
        let shape = p.graph.value(p.features).shape().to_vec();
        Ok(Tensor::new(shape, dfeat)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GanArchitecture;

    fn head() -> QHead {
        let t = GanArchitecture::tiny().build(0).unwrap();
        QHead::new(t.q, t.arch.latent, AdamConfig::default())
    }

    fn features(m: usize) -> Tensor {
        let data = (0..m * 32).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        Tensor::new(vec![m, 8, 2, 2], data).unwrap()
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut q = head();
        assert_eq!(q.backward(&Tensor::zeros(vec![2, 7])), Err(ModelError::NoPendingForward));
    }

    #[test]
    fn forwards_are_pure_between_updates() {
        let mut q = head();
        let a = q.forward(&features(3)).unwrap();
        let b = q.forward(&features(3)).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.shape(), &[3, 7]);
    }

    #[test]
    fn zero_upstream_leaves_parameters() {
        let mut q = head();
        let before = q.network().params().clone();
        q.forward(&features(2)).unwrap();
        let d = q.backward(&Tensor::zeros(vec![2, 7])).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert!(q.network().params().bitwise_eq(&before));
        assert_eq!(q.adam().step_count(), 1);
        assert_eq!(q.updates(), 1);
    }

    #[test]
    fn wrong_feature_shape() {
        let mut q = head();
        assert!(q.forward(&Tensor::zeros(vec![2, 8, 3, 3])).is_err());
    }
}
