//! Run configuration as flat `section.key=value` lines.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use infogan_dp::dp::PrivacyParams;
use infogan_dp::models::{parse_layers, render_layers, ContinuousPrior, GanArchitecture};
use infogan_dp::optim::AdamConfig;
use infogan_dp::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    TrainDist,
    Sample,
    Sweep,
    InspectPrivacy,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Train,
        Command::TrainDist,
        Command::Sample,
        Command::Sweep,
        Command::InspectPrivacy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::TrainDist => "train-dist",
            Command::Sample => "sample",
            Command::Sweep => "sweep",
            Command::InspectPrivacy => "inspect-privacy",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize, seed: u64 },
    Idx { images: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Tcp,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::InProcess => "in-process",
            TransportKind::Tcp => "tcp",
        }
    }
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in-process" => Ok(TransportKind::InProcess),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(format!("expected `in-process` or `tcp`, got `{s}`")),
        }
    }
}

/// A latent code addressed by kind and index: `c0` continuous, `d0` discrete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeRef {
    Continuous(usize),
    Discrete(usize),
}

impl fmt::Display for CodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodeRef::Continuous(i) => write!(f, "c{i}"),
            CodeRef::Discrete(i) => write!(f, "d{i}"),
        }
    }
}

impl FromStr for CodeRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("expected `c<index>` or `d<index>`, got `{s}`");
        let (kind, idx) = s.split_at_checked(1).ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        match kind {
            "c" => Ok(CodeRef::Continuous(idx)),
            "d" => Ok(CodeRef::Discrete(idx)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Command,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSource,
    /// Examples per client shard; 0 splits the dataset evenly.
    pub per_client: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub d_iters: u32,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub arch: GanArchitecture,
    pub clients: usize,
    pub rounds: u32,
    pub steps_per_round: u32,
    pub transport: TransportKind,
    pub endpoint: String,
    pub timeout_ms: u64,
    pub checkpoint: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub code: CodeRef,
    pub range: (f64, f64),
    pub ledger: PathBuf,
    pub report_delta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Command::Train,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSource::Synthetic { count: 1000, seed: 0 },
            per_client: 0,
            epsilon: 10.0,
            delta: 1e-5,
            clip_norm: 1.0,
            d_iters: 1,
            batch_size: 64,
            epochs: 50,
            max_steps: None,
            lambda: 1.0,
            adam: AdamConfig::default(),
            arch: GanArchitecture::mnist(),
            clients: 10,
            rounds: 1,
            steps_per_round: 1,
            transport: TransportKind::InProcess,
            endpoint: "127.0.0.1:0".into(),
            timeout_ms: 30_000,
            checkpoint: PathBuf::from("runs/default/checkpoints/final"),
            rows: 10,
            cols: 10,
            code: CodeRef::Continuous(0),
            range: (-1.0, 1.0),
            ledger: PathBuf::from("runs/default/ledger.txt"),
            report_delta: 1e-5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::invalid(key, format!("cannot parse `{value}`: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: fmt::Display>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "mode" => self.mode = parse::<Command>(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "data.source" => {
                self.data = match v {
                    "synthetic" => match self.data {
                        DataSource::Synthetic { .. } => self.data.clone(),
                        DataSource::Idx { .. } => DataSource::Synthetic { count: 1000, seed: 0 },
                    },
                    "idx" => match &self.data {
                        DataSource::Idx { .. } => self.data.clone(),
                        DataSource::Synthetic { .. } => DataSource::Idx { images: PathBuf::new() },
                    },
                    _ => return Err(CliError::invalid(key, format!("expected `synthetic` or `idx`, got `{v}`"))),
                }
            }
            "data.synth_count" | "data.synth_seed" => {
                let DataSource::Synthetic { count, seed } = &mut self.data else {
                    return Err(CliError::invalid(key, "only valid with data.source=synthetic"));
                };
                if key == "data.synth_count" {
                    *count = parse(key, v)?;
                } else {
                    *seed = parse(key, v)?;
                }
            }
            "data.images" => self.data = DataSource::Idx { images: PathBuf::from(v) },
            "data.per_client" => self.per_client = parse(key, v)?,
            "privacy.epsilon" => self.epsilon = parse(key, v)?,
            "privacy.delta" => self.delta = parse(key, v)?,
            "privacy.clip_norm" => self.clip_norm = parse(key, v)?,
            "privacy.d_iters" => self.d_iters = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.max_steps" => {
                self.max_steps = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "train.lambda" => self.lambda = parse(key, v)?,
            "train.learning_rate" => self.adam.learning_rate = parse(key, v)?,
            "train.beta1" => self.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => self.adam.eps = parse(key, v)?,
            "model.preset" => {
                self.arch = match v {
                    "mnist" => GanArchitecture::mnist(),
                    "tiny" => GanArchitecture::tiny(),
                    _ => return Err(CliError::invalid(key, format!("expected `mnist` or `tiny`, got `{v}`"))),
                }
            }
            "model.noise_dim" => self.arch.latent.noise_dim = parse(key, v)?,
            "model.discrete" => self.arch.latent.discrete = list(key, v)?,
            "model.continuous" => self.arch.latent.continuous = parse(key, v)?,
            "model.prior" => {
                self.arch.latent.prior = ContinuousPrior::parse(v)
                    .ok_or_else(|| CliError::invalid(key, format!("expected `uniform` or `gaussian`, got `{v}`")))?
            }
            "model.image_shape" => {
                self.arch.image_shape = v
                    .split('x')
                    .map(|d| parse(key, d))
                    .collect::<Result<_, _>>()?
            }
            "model.generator" | "model.discriminator" | "model.q" => {
                let layers = parse_layers(v).map_err(|e| CliError::invalid(key, e.to_string()))?;
                match key {
                    "model.generator" => self.arch.generator = layers,
                    "model.discriminator" => self.arch.discriminator = layers,
                    _ => self.arch.q = layers,
                }
            }
            "model.tap" => self.arch.tap = parse(key, v)?,
            "dist.clients" => self.clients = parse(key, v)?,
            "dist.rounds" => self.rounds = parse(key, v)?,
            "dist.steps_per_round" => self.steps_per_round = parse(key, v)?,
            "dist.transport" => self.transport = parse(key, v)?,
            "dist.endpoint" => self.endpoint = v.to_string(),
            "dist.timeout_ms" => self.timeout_ms = parse(key, v)?,
            "grid.checkpoint" => self.checkpoint = PathBuf::from(v),
            "grid.rows" => self.rows = parse(key, v)?,
            "grid.cols" => self.cols = parse(key, v)?,
            "sweep.code" => self.code = parse(key, v)?,
            "sweep.min" => self.range.0 = parse(key, v)?,
            "sweep.max" => self.range.1 = parse(key, v)?,
            "inspect.ledger" => self.ledger = PathBuf::from(v),
            "inspect.delta" => self.report_delta = parse(key, v)?,
            _ => return Err(CliError::invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text`; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::invalid(format!("line {}", n + 1), "expected key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("mode", self.mode.name().into());
        kv("seed", self.seed.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        match &self.data {
            DataSource::Synthetic { count, seed } => {
                kv("data.source", "synthetic".into());
                kv("data.synth_count", count.to_string());
                kv("data.synth_seed", seed.to_string());
            }
            DataSource::Idx { images } => {
                kv("data.source", "idx".into());
                kv("data.images", images.display().to_string());
            }
        }
        kv("data.per_client", self.per_client.to_string());
        kv("privacy.epsilon", self.epsilon.to_string());
        kv("privacy.delta", self.delta.to_string());
        kv("privacy.clip_norm", self.clip_norm.to_string());
        kv("privacy.d_iters", self.d_iters.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.max_steps", self.max_steps.map_or("none".into(), |s| s.to_string()));
        kv("train.lambda", self.lambda.to_string());
        kv("train.learning_rate", self.adam.learning_rate.to_string());
        kv("train.beta1", self.adam.beta1.to_string());
        kv("train.beta2", self.adam.beta2.to_string());
        kv("train.adam_eps", self.adam.eps.to_string());
        let latent = &self.arch.latent;
        kv("model.noise_dim", latent.noise_dim.to_string());
        kv("model.discrete", join(&latent.discrete, ","));
        kv("model.continuous", latent.continuous.to_string());
        kv("model.prior", latent.prior.name().into());
        kv("model.image_shape", join(&self.arch.image_shape, "x"));
        kv("model.generator", render_layers(&self.arch.generator));
        kv("model.discriminator", render_layers(&self.arch.discriminator));
        kv("model.tap", self.arch.tap.to_string());
        kv("model.q", render_layers(&self.arch.q));
        kv("dist.clients", self.clients.to_string());
        kv("dist.rounds", self.rounds.to_string());
        kv("dist.steps_per_round", self.steps_per_round.to_string());
        kv("dist.transport", self.transport.name().into());
        kv("dist.endpoint", self.endpoint.clone());
        kv("dist.timeout_ms", self.timeout_ms.to_string());
        kv("grid.checkpoint", self.checkpoint.display().to_string());
        kv("grid.rows", self.rows.to_string());
        kv("grid.cols", self.cols.to_string());
        kv("sweep.code", self.code.to_string());
        kv("sweep.min", self.range.0.to_string());
        kv("sweep.max", self.range.1.to_string());
        kv("inspect.ledger", self.ledger.display().to_string());
        kv("inspect.delta", self.report_delta.to_string());
        out
    }

    /// Range checks for the current mode, naming the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(CliError::invalid(field, msg)) };
        match self.mode {
            Command::InspectPrivacy => {
                return check(
                    self.report_delta > 0.0 && self.report_delta < 1.0,
                    "inspect.delta",
                    "must lie in (0, 1)",
                )
            }
            Command::Sample | Command::Sweep => {
                check(self.rows >= 1, "grid.rows", "must be at least 1")?;
                check(self.cols >= 1, "grid.cols", "must be at least 1")?;
                check(self.range.0.is_finite(), "sweep.min", "must be finite")?;
                check(self.range.1.is_finite(), "sweep.max", "must be finite")?;
                let latent = &self.arch.latent;
                if self.mode == Command::Sweep {
                    match self.code {
                        CodeRef::Continuous(i) => check(i < latent.continuous, "sweep.code", "no such continuous code")?,
                        CodeRef::Discrete(i) => check(i < latent.discrete.len(), "sweep.code", "no such discrete code")?,
                    }
                }
                return self.arch.latent.validate().map_err(|e| CliError::invalid("model", e.to_string()));
            }
            Command::Train | Command::TrainDist => {}
        }
        check(self.epsilon > 0.0, "privacy.epsilon", "must be positive")?;
        check(self.delta > 0.0 && self.delta < 1.0, "privacy.delta", "must lie in (0, 1)")?;
        check(self.clip_norm > 0.0, "privacy.clip_norm", "must be positive")?;
        check(
            self.clip_norm.is_finite() || self.epsilon.is_infinite(),
            "privacy.clip_norm",
            "may be infinite only when privacy.epsilon is infinite",
        )?;
        check(self.d_iters >= 1, "privacy.d_iters", "must be at least 1")?;
        check(self.batch_size >= 1, "train.batch_size", "must be at least 1")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "train.lambda", "must be finite and non-negative")?;
        check(
            self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite(),
            "train.learning_rate",
            "must be positive",
        )?;
        check((0.0..1.0).contains(&self.adam.beta1), "train.beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.adam.beta2), "train.beta2", "must lie in [0, 1)")?;
        check(self.adam.eps > 0.0, "train.adam_eps", "must be positive")?;
        if let DataSource::Synthetic { count, .. } = self.data {
            check(count >= 1, "data.synth_count", "must be at least 1")?;
        }
        if self.mode == Command::TrainDist {
            check(self.clients >= 1, "dist.clients", "must be at least 1")?;
            check(self.timeout_ms >= 1, "dist.timeout_ms", "must be at least 1")?;
        }
        let [_, h, w] = self.arch.image_shape[..] else {
            return Err(CliError::invalid("model.image_shape", "expected CxHxW"));
        };
        check(self.arch.image_shape[0] == 1 && h >= 1 && w >= 1, "model.image_shape", "expected 1xHxW")?;
        self.arch.build(self.seed).map_err(|e| CliError::invalid("model", e.to_string()))?;
        Ok(())
    }

    /// Training parameters for a dataset of `dataset_size` examples.
    pub fn train_config(&self, dataset_size: usize) -> Result<TrainConfig, CliError> {
        let privacy = PrivacyParams::new(
            self.epsilon,
            self.delta,
            self.clip_norm,
            self.batch_size,
            dataset_size,
            self.d_iters,
        )?;
        Ok(TrainConfig {
            privacy,
            arch: self.arch.clone(),
            epochs: self.epochs,
            adam: self.adam,
            lambda: self.lambda,
            seed: self.seed,
            max_steps: self.max_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn delta_two_names_field() {
        let c = RunConfig::parse("privacy.delta=2").unwrap();
        match c.validate() {
            Err(CliError::Validation { field, .. }) => assert_eq!(field, "privacy.delta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_name_field() {
        for (text, field) in [
            ("train.batch_size=abc", "train.batch_size"),
            ("nope.key=1", "nope.key"),
            ("model.generator=warp:3", "model.generator"),
            ("sweep.code=x3", "sweep.code"),
        ] {
            match RunConfig::parse(text) {
                Err(CliError::Validation { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn preset_expands() {
        let c = RunConfig::parse("model.preset=tiny\n# comment\n\nseed=4").unwrap();
        assert_eq!(c.arch, GanArchitecture::tiny());
        assert_eq!(c.seed, 4);
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn code_refs() {
        assert_eq!("c1".parse::<CodeRef>().unwrap(), CodeRef::Continuous(1));
        assert_eq!("d0".parse::<CodeRef>().unwrap(), CodeRef::Discrete(0));
        assert!("".parse::<CodeRef>().is_err());
        assert!("c".parse::<CodeRef>().is_err());
    }
}
