//! One client's DP-InfoGAN training step and loop.
//!
//! A step runs, in order: code sampling, the generator forward, `I_d`
//! privatized discriminator updates (per-example gradients, clip, average,
//! noise, Adam), the Q exchange through a [`QChannel`], and the generator
//! update. Real images enter only the discriminator phase.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{AutogradError, Graph, LeafTag};
use crate::derive_seed;
use crate::dp::{privatize_gradients, AccountantLedger, DpError, PrivacyParams};
use crate::models::gan::{discriminator_forward, generator_forward};
use crate::models::losses::{d_loss, g_adv_loss, info_objective, q_nll, CodeTargets};
use crate::models::{
    sample_codes, CodeBatch, GanArchitecture, LatentSpec, ModelError, Mode, Network, QHead,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{ParamError, ParamSet};
use crate::tensor::{ShapeError, Tensor};

const TRAIN_STREAM: u64 = 0x0074_7261_696e;
const SHUFFLE_STREAM: u64 = 0x7368_7566;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Batch size and `I_d` live here and nowhere else.
    pub privacy: PrivacyParams,
    pub arch: GanArchitecture,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub lambda: f64,
    pub seed: u64,
    /// Stop after this many steps in total, even mid-epoch.
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.privacy.batch_size
    }

    pub fn d_iters(&self) -> usize {
        self.privacy.d_iters as usize
    }

    pub fn latent(&self) -> &LatentSpec {
        &self.arch.latent
    }

    /// Real examples consumed per step.
    pub fn real_per_step(&self) -> usize {
        self.batch_size() * self.d_iters()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(TrainError::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if self.arch.latent.q_output_dim() == 0 {
            return Err(TrainError::Config("latent spec has no codes".into()));
        }
        self.arch.latent.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("step {step}: non-finite value ({detail})")]
    NonFinite { step: u64, detail: String },
}

impl From<AutogradError> for TrainError {
    fn from(e: AutogradError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<ParamError> for TrainError {
    fn from(e: ParamError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<ShapeError> for TrainError {
    fn from(e: ShapeError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Identifies one Q exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Exchange {
    pub client_id: u32,
    pub round: u32,
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Access to Q: features go forward, gradients w.r.t. Q's packed output come back.
pub trait QChannel {
    fn forward(&mut self, ex: Exchange, features: &Tensor) -> Result<Tensor, ChannelError>;
    fn backward(&mut self, ex: Exchange, upstream: &Tensor) -> Result<Tensor, ChannelError>;
}

/// Q held in the same process as the client.
#[derive(Debug)]
pub struct LocalQ {
    head: QHead,
}

impl LocalQ {
    pub fn new(head: QHead) -> Self {
        Self { head }
    }

    pub fn from_network(q: Network, config: &TrainConfig) -> Self {
        Self::new(QHead::new(q, config.arch.latent.clone(), config.adam))
    }

    pub fn head(&self) -> &QHead {
        &self.head
    }

    pub fn into_head(self) -> QHead {
        self.head
    }
}

impl QChannel for LocalQ {
    fn forward(&mut self, _ex: Exchange, features: &Tensor) -> Result<Tensor, ChannelError> {
        Ok(self.head.forward(features)?)
    }

    fn backward(&mut self, _ex: Exchange, upstream: &Tensor) -> Result<Tensor, ChannelError> {
        Ok(self.head.backward(upstream)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Mean per-example discriminator loss of the last discriminator iteration.
    pub d_loss: f64,
    /// `g_adv + λ·q`
    pub g_loss: f64,
    pub q_loss: f64,
    pub pre_clip_mean: f64,
    pub pre_clip_max: f64,
    /// Every per-example norm after clipping, over all discriminator iterations.
    pub post_clip_norms: Vec<f64>,
    pub noised_updates: u32,
    pub ledger_entries: usize,
    pub eps_spent: Option<f64>,
    /// Leaf tags present on the generator/Q tapes of this step.
    pub g_phase_tags: BTreeSet<LeafTag>,
}

impl StepReport {
    pub fn post_clip_max(&self) -> f64 {
        self.post_clip_norms.iter().cloned().fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        [self.d_loss, self.g_loss, self.q_loss, self.pre_clip_mean, self.pre_clip_max]
            .iter()
            .all(|v| v.is_finite())
    }

    /// `step=<k> d=<v> g=<v> q=<v> maxnorm=<v> eps_spent=<v>`
    pub fn metrics_line(&self) -> String {
        format!(
            "step={} d={} g={} q={} maxnorm={} eps_spent={}",
            self.step,
            self.d_loss,
            self.g_loss,
            self.q_loss,
            self.pre_clip_max,
            self.eps_spent.unwrap_or(0.0)
        )
    }
}

/// Shuffled batches of indices; reshuffles once the remainder cannot fill a batch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    batch: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self, TrainError> {
        if batch == 0 || batch > len {
            return Err(TrainError::Config(format!(
                "shard of {len} examples cannot fill a batch of {batch}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            batch,
            cursor: 0,
            rng,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Generator and discriminator of one client, with optimizers and privacy ledger.
#[derive(Debug, Clone)]
pub struct DpTrainer {
    config: TrainConfig,
    client_id: u32,
    generator: Network,
    discriminator: Network,
    adam_g: AdamState,
    adam_d: AdamState,
    ledger: AccountantLedger,
    rng: ChaCha8Rng,
    steps: u64,
}

impl DpTrainer {
    pub fn new(
        config: TrainConfig,
        generator: Network,
        discriminator: Network,
        client_id: u32,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let adam_g = AdamState::new(config.adam, generator.params());
        let adam_d = AdamState::new(config.adam, discriminator.params());
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TRAIN_STREAM));
        Ok(Self {
            config,
            client_id,
            generator,
            discriminator,
            adam_g,
            adam_d,
            ledger: AccountantLedger::new(),
            rng,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    pub fn generator(&self) -> &Network {
        &self.generator
    }

    pub fn discriminator(&self) -> &Network {
        &self.discriminator
    }

    pub fn generator_mut(&mut self) -> &mut Network {
        &mut self.generator
    }

    pub fn discriminator_mut(&mut self) -> &mut Network {
        &mut self.discriminator
    }

    pub fn ledger(&self) -> &AccountantLedger {
        &self.ledger
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Sampler over a shard, seeded from this trainer's configuration.
    pub fn sampler(&self, shard_len: usize) -> Result<BatchSampler, TrainError> {
        BatchSampler::new(
            shard_len,
            self.config.real_per_step(),
            derive_seed(self.config.seed, SHUFFLE_STREAM),
        )
    }

    /// Generator and discriminator state for checkpoints.
    pub fn checkpoint(&self) -> (ParamSet, ParamSet) {
        (self.generator.state(), self.discriminator.state())
    }

    /// One full step on `real`, which holds `I_d·m` images.
    pub fn train_step(
        &mut self,
        real: &Tensor,
        q: &mut dyn QChannel,
        round: u32,
    ) -> Result<StepReport, TrainError> {
        let m = self.config.batch_size();
        let d_iters = self.config.d_iters();
        let arch = &self.config.arch;
        let mut expected = vec![m * d_iters];
        expected.extend_from_slice(&arch.image_shape);
        if real.shape() != expected.as_slice() {
            return Err(TrainError::Model(ModelError::Shape(format!(
                "real batch {:?} should be {expected:?}",
                real.shape()
            ))));
        }
        let step = self.steps;

        let codes = sample_codes(&arch.latent, m, &mut self.rng)?;
        let batch = CodeBatch::new(&arch.latent, &codes)?;

        let mut gg = Graph::new();
        let z = gg.leaf(batch.generator_input.clone(), LeafTag::Latent, false);
        let gb = self.generator.bind(&mut gg, LeafTag::Generator, true);
        let gf = generator_forward(&self.generator, &mut gg, &gb, z, Mode::Train)?;
        let fake = gf.output();
        let fake_vals = gg.value(fake).clone();

        let privacy = self.config.privacy;
        let mut d_loss_mean = 0.0;
        let mut pre_norms = Vec::with_capacity(m * d_iters);
        let mut post_norms = Vec::with_capacity(m * d_iters);
        let mut noised = 0;
        for it in 0..d_iters {
            let chunk = real.slice_outer(it * m, m);
            let mut grads = Vec::with_capacity(m);
            let mut loss_sum = 0.0;
            for i in 0..m {
                let mut dg = Graph::new();
                let db = self.discriminator.bind(&mut dg, LeafTag::Discriminator, true);
                let xr = dg.leaf(chunk.slice_outer(i, 1), LeafTag::RealImage, false);
                let xf = dg.leaf(fake_vals.slice_outer(i, 1), LeafTag::Generated, false);
                let pr = discriminator_forward(&self.discriminator, &mut dg, &db, xr, arch.tap)?.probs;
                let pf = discriminator_forward(&self.discriminator, &mut dg, &db, xf, arch.tap)?.probs;
                let l = d_loss(&mut dg, pr, pf)?;
                loss_sum += dg.value(l).data()[0];
                dg.backward(l)?;
                grads.push(db.flat_grad(&dg));
            }
            d_loss_mean = loss_sum / m as f64;
            let p = privatize_gradients(&grads, privacy.clip_norm, privacy.sigma_n(), &mut self.rng)?;
            let split = self.discriminator.params().split_flat(&p.gradient)?;
            adam_step(self.discriminator.params_mut(), &split, &mut self.adam_d)?;
            if privacy.is_noised() {
                self.ledger.append(privacy.sigma_n(), 1)?;
                noised += 1;
            }
            pre_norms.extend(p.pre_clip_norms);
            post_norms.extend(p.post_clip_norms);
        }

        let dbg = self.discriminator.bind(&mut gg, LeafTag::Discriminator, false);
        let dout = discriminator_forward(&self.discriminator, &mut gg, &dbg, fake, arch.tap)?;
        let g_adv = g_adv_loss(&mut gg, dout.probs)?;
        let g_adv_value = gg.value(g_adv).data()[0];
        let features = gg.value(dout.features).clone();

        let ex = Exchange {
            client_id: self.client_id,
            round,
            step: step as u32,
        };
        let packed = q.forward(ex, &features)?;
        let mut lg = Graph::new();
        let pk = lg.leaf(packed, LeafTag::Received, true);
        let targets = CodeTargets::bind(&mut lg, &batch.one_hots, batch.continuous.as_ref());
        let ql = q_nll(&mut lg, pk, &targets, &arch.latent)?;
        let info = info_objective(&mut lg, ql, self.config.lambda)?;
        let q_value = lg.value(ql).data()[0];
        let info_value = lg.value(info).data()[0];
        lg.backward(info)?;
        let packed_shape = lg.value(pk).shape().to_vec();
        let upstream = Tensor::new(packed_shape, lg.take_grad(pk))?;
        let dfeat = q.backward(ex, &upstream)?;
        if dfeat.shape() != features.shape() {
            return Err(TrainError::Channel(ChannelError::Protocol(format!(
                "feature gradient {:?} does not match features {:?}",
                dfeat.shape(),
                features.shape()
            ))));
        }
        gg.backward_with_seeds(&[(g_adv, &[1.0]), (dout.features, dfeat.data())])?;
        let ggrads = gb.grads(&gg);
        adam_step(self.generator.params_mut(), &ggrads, &mut self.adam_g)?;
        self.generator.commit_stats(&gf.stats);

        let mut tags = gg.leaf_tags();
        tags.extend(lg.leaf_tags());
        let pre_max = pre_norms.iter().cloned().fold(0.0, f64::max);
        let pre_mean = pre_norms.iter().sum::<f64>() / pre_norms.len() as f64;
        self.steps += 1;
        let report = StepReport {
            step,
            d_loss: d_loss_mean,
            g_loss: g_adv_value + info_value,
            q_loss: q_value,
            pre_clip_mean: pre_mean,
            pre_clip_max: pre_max,
            post_clip_norms: post_norms,
            noised_updates: noised,
            ledger_entries: self.ledger.entries().len(),
            eps_spent: self.ledger.epsilon_spent(privacy.delta)?,
            g_phase_tags: tags,
        };
        if !report.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: report.metrics_line(),
            });
        }
        Ok(report)
    }

    /// Draws the next batch from `sampler` and runs one step on it.
    pub fn step_from(
        &mut self,
        images: &Tensor,
        sampler: &mut BatchSampler,
        q: &mut dyn QChannel,
        round: u32,
    ) -> Result<StepReport, TrainError> {
        let idx = sampler.next_batch();
        self.train_step(&images.gather_outer(&idx), q, round)
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|cap| self.steps < cap)
    }

    /// One pass of `⌊len / (I_d·m)⌋` steps; stops early at `max_steps`.
    pub fn train_epoch(
        &mut self,
        images: &Tensor,
        sampler: &mut BatchSampler,
        q: &mut dyn QChannel,
    ) -> Result<Vec<StepReport>, TrainError> {
        let mut reports = Vec::new();
        for _ in 0..sampler.batches_per_epoch() {
            if !self.budget_left() {
                break;
            }
            reports.push(self.step_from(images, sampler, q, 0)?);
        }
        Ok(reports)
    }

    /// `epochs` passes over `images` with a fresh shuffle per pass.
    pub fn train(&mut self, images: &Tensor, q: &mut dyn QChannel) -> Result<Vec<StepReport>, TrainError> {
        let mut reports = Vec::new();
        if self.config.epochs == 0 {
            return Ok(reports);
        }
        let mut sampler = self.sampler(images.shape()[0])?;
        for _ in 0..self.config.epochs {
            if !self.budget_left() {
                break;
            }
            reports.extend(self.train_epoch(images, &mut sampler, q)?);
        }
        Ok(reports)
    }
}
