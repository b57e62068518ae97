//! Adversarial and information losses, built on a tape.
//!
//! Each function records its arithmetic on the given [`Graph`] and returns
//! the scalar loss node. The `*_value` helpers evaluate the same expression
//! without keeping a tape around.

use super::{LatentSpec, ModelError, PROB_CLAMP};
use crate::autograd::{Graph, LeafTag, NodeId};
use crate::tensor::Tensor;

fn clamp_prob(g: &mut Graph, p: NodeId) -> Result<NodeId, ModelError> {
    Ok(g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// `−mean[ln p_real + ln(1 − p_fake)]`
pub fn d_loss(g: &mut Graph, p_real: NodeId, p_fake: NodeId) -> Result<NodeId, ModelError> {
    let pr = clamp_prob(g, p_real)?;
    let pf = clamp_prob(g, p_fake)?;
    let lr = g.ln(pr)?;
    let neg = g.scale(pf, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let lf = g.ln(one_minus)?;
    let s = g.add(lr, lf)?;
    let m = g.mean(s)?;
    Ok(g.scale(m, -1.0)?)
}

/// Non-saturating generator loss `−mean ln p_fake`.
pub fn g_adv_loss(g: &mut Graph, p_fake: NodeId) -> Result<NodeId, ModelError> {
    let pf = clamp_prob(g, p_fake)?;
    let l = g.ln(pf)?;
    let m = g.mean(l)?;
    Ok(g.scale(m, -1.0)?)
}

/// Code targets bound as leaves on a tape.
#[derive(Debug, Clone)]
pub struct CodeTargets {
    pub one_hots: Vec<NodeId>,
    pub continuous: Option<NodeId>,
}

impl CodeTargets {
    pub fn bind(
        g: &mut Graph,
        one_hots: &[Tensor],
        continuous: Option<&Tensor>,
    ) -> Self {
        Self {
            one_hots: one_hots
                .iter()
                .map(|t| g.leaf(t.clone(), LeafTag::Code, false))
                .collect(),
            continuous: continuous.map(|t| g.leaf(t.clone(), LeafTag::Code, false)),
        }
    }
}

/// Batch mean of the code negative log-likelihood under Q's packed output.
///
/// Per example: cross-entropy of each discrete code plus, per continuous code,
/// `0.5·ln(2π·var) + (c − mean)²/(2·var)`.
pub fn q_nll(
    g: &mut Graph,
    packed: NodeId,
    targets: &CodeTargets,
    spec: &LatentSpec,
) -> Result<NodeId, ModelError> {
    let shape = g.value(packed).shape().to_vec();
    if shape.len() != 2 || shape[1] != spec.q_output_dim() {
        return Err(ModelError::Shape(format!(
            "Q output {shape:?} does not match {} code columns",
            spec.q_output_dim()
        )));
    }
    let m = shape[0];
    if targets.one_hots.len() != spec.discrete.len()
        || targets.continuous.is_some() != (spec.continuous > 0)
    {
        return Err(ModelError::Shape("code targets do not match the latent spec".into()));
    }
    let mut terms = Vec::new();
    let mut offset = 0;
    for (&k, &target) in spec.discrete.iter().zip(&targets.one_hots) {
        if g.value(target).shape() != [m, k] {
            return Err(ModelError::Shape(format!(
                "one-hot target {:?} is not [{m}, {k}]",
                g.value(target).shape()
            )));
        }
        let logits = g.slice_cols(packed, offset, k)?;
        let ls = g.log_softmax(logits)?;
        let picked = g.mul(ls, target)?;
        let s = g.sum(picked)?;
        terms.push(g.scale(s, -1.0)?);
        offset += k;
    }
    if let Some(c) = targets.continuous {
        let n = spec.continuous;
        if g.value(c).shape() != [m, n] {
            return Err(ModelError::Shape(format!(
                "continuous target {:?} is not [{m}, {n}]",
                g.value(c).shape()
            )));
        }
        let mean = g.slice_cols(packed, offset, n)?;
        let var = g.slice_cols(packed, offset + n, n)?;
        let two_pi_var = g.scale(var, 2.0 * std::f64::consts::PI)?;
        let log_term = g.ln(two_pi_var)?;
        let half_log = g.scale(log_term, 0.5)?;
        let diff = g.sub(c, mean)?;
        let sq = g.square(diff)?;
        let two_var = g.scale(var, 2.0)?;
        let quad = g.div(sq, two_var)?;
        let per = g.add(half_log, quad)?;
        terms.push(g.sum(per)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Err(ModelError::Config("latent spec has no codes for Q to estimate".into())),
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / m as f64)?)
}

/// `λ·q_loss`, the information term added to the generator loss.
pub fn info_objective(g: &mut Graph, q_loss: NodeId, lambda: f64) -> Result<NodeId, ModelError> {
    if !(lambda >= 0.0) {
        return Err(ModelError::Config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    Ok(g.scale(q_loss, lambda)?)
}

fn probs_leaf(g: &mut Graph, p: &[f64]) -> NodeId {
    g.constant(Tensor::vector(p.to_vec()))
}

pub fn d_loss_value(p_real: &[f64], p_fake: &[f64]) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let r = probs_leaf(&mut g, p_real);
    let f = probs_leaf(&mut g, p_fake);
    let l = d_loss(&mut g, r, f)?;
    Ok(g.value(l).data()[0])
}

pub fn g_adv_loss_value(p_fake: &[f64]) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let f = probs_leaf(&mut g, p_fake);
    let l = g_adv_loss(&mut g, f)?;
    Ok(g.value(l).data()[0])
}

pub fn q_nll_value(
    packed: &Tensor,
    one_hots: &[Tensor],
    continuous: Option<&Tensor>,
    spec: &LatentSpec,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let p = g.constant(packed.clone());
    let t = CodeTargets::bind(&mut g, one_hots, continuous);
    let l = q_nll(&mut g, p, &t, spec)?;
    Ok(g.value(l).data()[0])
}
