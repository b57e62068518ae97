//! The five commands. Each returns a short summary for standard output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use infogan_dp::data::{load_idx_images, shard_dataset, synth_images, DatasetShard, DatasetSource};
use infogan_dp::derive_seed;
use infogan_dp::dist::{
    build_clients, build_service, measure_traffic, run_rounds, InProcess, TcpServer, TcpTransport,
    TrafficLog, TrafficSummary, Transport,
};
use infogan_dp::dp::report::{privacy_report, LedgerFile};
use infogan_dp::dp::AccountantLedger;
use infogan_dp::models::{sample_codes, CodeBatch, Mode, Network};
use infogan_dp::params::{ParamRole, ParamSet};
use infogan_dp::trainer::{DpTrainer, LocalQ, StepReport, TrainConfig};
use infogan_dp::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CodeRef, Command, DataSource, RunConfig, TransportKind};
use crate::error::CliError;
use crate::grid::Grid;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.log";
pub const LEDGER_FILE: &str = "ledger.txt";
pub const REPORT_FILE: &str = "privacy_report.txt";
pub const SAMPLES_FILE: &str = "samples.pgm";
pub const TRAFFIC_FILE: &str = "traffic.log";
pub const GENERATOR_FILE: &str = "generator.params";
pub const DISCRIMINATOR_FILE: &str = "discriminator.params";
pub const Q_FILE: &str = "q.params";

const SAMPLE_STREAM: u64 = 0x7361_6d70;
const SWEEP_STREAM: u64 = 0x7377_6570;

pub fn run(config: &RunConfig) -> Result<String, CliError> {
    config.validate()?;
    match config.mode {
        Command::Train => cmd_train(config).map(|o| o.summary()),
        Command::TrainDist => cmd_train_dist(config).map(|o| o.summary()),
        Command::Sample => cmd_sample(config).map(|p| format!("wrote {}", p.display())),
        Command::Sweep => cmd_sweep(config).map(|p| format!("wrote {}", p.display())),
        Command::InspectPrivacy => cmd_inspect_privacy(config),
    }
}

const IDX_HELP: &str = "the IDX image file does not exist; download train-images-idx3-ubyte.gz from the \
MNIST (or Fashion-MNIST) distribution, gunzip it, and point data.images at the result";

/// Loads the configured images as one shard of the whole dataset.
pub fn load_images(config: &RunConfig) -> Result<(Tensor, DatasetSource), CliError> {
    let shape = &config.arch.image_shape;
    let (images, source) = match &config.data {
        DataSource::Synthetic { count, seed } => {
            if shape[1] != shape[2] {
                return Err(CliError::invalid("model.image_shape", "synthetic images are square"));
            }
            (synth_images(*count, shape[1], *seed).0, DatasetSource::Synthetic { count: *count, seed: *seed })
        }
        DataSource::Idx { images } => {
            if !images.is_file() {
                return Err(CliError::invalid("data.images", format!("{}: {IDX_HELP}", images.display())));
            }
            (load_idx_images(images)?, DatasetSource::Idx(images.display().to_string()))
        }
    };
    if images.shape()[1..] != shape[..] {
        return Err(CliError::invalid(
            "data.images",
            format!("images are {:?}, the model expects {:?}", &images.shape()[1..], shape),
        ));
    }
    Ok((images, source))
}

/// Shards of `per_client` examples (even split when 0) for `clients` clients.
pub fn load_shards(config: &RunConfig, clients: usize) -> Result<Vec<DatasetShard>, CliError> {
    let (images, source) = load_images(config)?;
    let n = images.shape()[0];
    let per = if config.per_client == 0 { n / clients.max(1) } else { config.per_client };
    shard_dataset(&images, &source, clients, per, config.seed)
        .map_err(|e| CliError::invalid("data.per_client", e.to_string()))
}

fn write_params(dir: &Path, file: &str, params: &ParamSet) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(file), params.to_bytes())?;
    Ok(())
}

fn read_params(path: &Path, role: ParamRole) -> Result<ParamSet, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Runtime(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Ok(ParamSet::from_bytes(&bytes, role)?)
}

fn write_lines<'a>(path: &Path, lines: impl IntoIterator<Item = &'a str>) -> Result<(), CliError> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn ledger_file(config: &TrainConfig, ledger: &AccountantLedger) -> LedgerFile {
    LedgerFile {
        target: Some(config.privacy),
        ledger: ledger.clone(),
    }
}

/// `rows·cols` images from `generator` in evaluation mode.
fn sample_batch(generator: &Network, config: &RunConfig, n: usize, stream: u64) -> Result<Tensor, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream));
    let codes = sample_codes(&config.arch.latent, n, &mut rng)?;
    let batch = CodeBatch::new(&config.arch.latent, &codes)?;
    Ok(generator.evaluate(&batch.generator_input, Mode::Eval)?)
}

fn write_grid(path: &Path, images: &Tensor, rows: usize, cols: usize) -> Result<(), CliError> {
    fs::write(path, Grid::tile(images, rows, cols)?.to_pgm())?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub reports: Vec<StepReport>,
    pub ledger: AccountantLedger,
}

impl TrainOutcome {
    pub fn summary(&self) -> String {
        let last = self.reports.last().map_or("no steps".into(), StepReport::metrics_line);
        format!("{} steps, outputs in {}\n{last}", self.reports.len(), self.dir.display())
    }
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome, CliError> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), config.render())?;
    let shard = load_shards(config, 1)?.remove(0);
    let tc = config.train_config(shard.len())?;
    let triple = tc.arch.build(tc.seed)?;
    let mut q = LocalQ::from_network(triple.q, &tc);
    let mut trainer = DpTrainer::new(tc.clone(), triple.generator, triple.discriminator, 1)?;
    let mut sampler = trainer.sampler(shard.len())?;
    let mut reports = Vec::new();
    let mut metrics = Vec::new();
    for epoch in 1..=tc.epochs {
        if tc.max_steps.is_some_and(|cap| trainer.steps() >= cap) {
            break;
        }
        let epoch_reports = trainer.train_epoch(&shard.images, &mut sampler, &mut q)?;
        metrics.extend(epoch_reports.iter().map(StepReport::metrics_line));
        write_lines(&dir.join(METRICS_FILE), metrics.iter().map(String::as_str))?;
        reports.extend(epoch_reports);
        let ckpt = dir.join("checkpoints").join(format!("epoch-{epoch:04}"));
        let (g, d) = trainer.checkpoint();
        write_params(&ckpt, GENERATOR_FILE, &g)?;
        write_params(&ckpt, DISCRIMINATOR_FILE, &d)?;
        write_params(&ckpt, Q_FILE, &q.head().network().state())?;
    }
    write_lines(&dir.join(METRICS_FILE), metrics.iter().map(String::as_str))?;
    let final_dir = dir.join("checkpoints").join("final");
    let (g, d) = trainer.checkpoint();
    write_params(&final_dir, GENERATOR_FILE, &g)?;
    write_params(&final_dir, DISCRIMINATOR_FILE, &d)?;
    write_params(&final_dir, Q_FILE, &q.head().network().state())?;
    let lf = ledger_file(&tc, trainer.ledger());
    fs::write(dir.join(LEDGER_FILE), lf.render())?;
    fs::write(dir.join(REPORT_FILE), privacy_report(&lf, tc.privacy.delta)?)?;
    let samples = sample_batch(trainer.generator(), config, config.rows * config.cols, SAMPLE_STREAM)?;
    write_grid(&dir.join(SAMPLES_FILE), &samples, config.rows, config.cols)?;
    Ok(TrainOutcome {
        dir,
        reports,
        ledger: trainer.ledger().clone(),
    })
}

#[derive(Debug, Clone)]
pub struct DistOutcome {
    pub dir: PathBuf,
    pub update_counter: u64,
    pub q_hash: String,
    pub client_order: Vec<u32>,
    pub reports: Vec<Vec<StepReport>>,
    pub traffic: TrafficSummary,
    pub param_header_frames: u64,
}

impl DistOutcome {
    pub fn summary(&self) -> String {
        format!(
            "{} clients, {} Q updates, q_hash={}, {} bytes over {} exchanges, outputs in {}",
            self.reports.len(),
            self.update_counter,
            self.q_hash,
            self.traffic.step_bytes(),
            self.traffic.steps,
            self.dir.display()
        )
    }
}

pub fn client_dir(dir: &Path, client_id: u32) -> PathBuf {
    dir.join(format!("client-{client_id:02}"))
}

pub fn cmd_train_dist(config: &RunConfig) -> Result<DistOutcome, CliError> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), config.render())?;
    let shards = load_shards(config, config.clients)?;
    let tc = config.train_config(shards[0].len())?;
    let service = Arc::new(Mutex::new(build_service(&tc)?));
    let log = TrafficLog::new();
    let timeout = Some(Duration::from_millis(config.timeout_ms));
    let images: Vec<Tensor> = shards.into_iter().map(|s| s.images).collect();

    let (mut clients, server) = match config.transport {
        TransportKind::InProcess => {
            let svc = Arc::clone(&service);
            let clients = build_clients(&tc, images, &log, |_| {
                Ok(Box::new(InProcess::new(Arc::clone(&svc))) as Box<dyn Transport>)
            })?;
            (clients, None)
        }
        TransportKind::Tcp => {
            let server = TcpServer::spawn(config.endpoint.as_str(), Arc::clone(&service), timeout)
                .map_err(|e| CliError::invalid("dist.endpoint", e.to_string()))?;
            let addr = server.addr();
            let clients = build_clients(&tc, images, &log, |_| {
                Ok(Box::new(TcpTransport::connect(addr, timeout)?) as Box<dyn Transport>)
            })?;
            (clients, Some(server))
        }
    };
    let outcome = run_rounds(&mut clients, config.rounds, config.steps_per_round);

    let mut combined = String::new();
    for c in &clients {
        let cd = client_dir(&dir, c.client_id());
        fs::create_dir_all(&cd)?;
        let lines: Vec<String> = c.reports.iter().map(StepReport::metrics_line).collect();
        write_lines(&cd.join(METRICS_FILE), lines.iter().map(String::as_str))?;
        let (g, d) = c.trainer.checkpoint();
        write_params(&cd.join("checkpoints"), GENERATOR_FILE, &g)?;
        write_params(&cd.join("checkpoints"), DISCRIMINATOR_FILE, &d)?;
        let lf = ledger_file(c.trainer.config(), c.trainer.ledger());
        fs::write(cd.join(LEDGER_FILE), lf.render())?;
        let _ = writeln!(combined, "client: {}", c.client_id());
        combined.push_str(&privacy_report(&lf, tc.privacy.delta)?);
    }
    fs::write(dir.join(REPORT_FILE), combined)?;
    write_lines(&dir.join(TRAFFIC_FILE), log.lines().iter().map(String::as_str))?;
    let reports = clients.iter().map(|c| c.reports.clone()).collect();
    drop(clients);
    if let Some(server) = server {
        server.shutdown();
    }
    outcome?;

    let svc = service.lock().map_err(|_| CliError::Runtime("service lock poisoned".into()))?;
    write_params(&dir.join("service"), Q_FILE, &svc.head().network().state())?;
    let records = log.records();
    let traffic = measure_traffic(&records);
    Ok(DistOutcome {
        dir,
        update_counter: svc.update_counter(),
        q_hash: svc.q_hash(),
        client_order: svc.client_order(),
        reports,
        traffic,
        param_header_frames: traffic.param_header_frames,
    })
}

fn load_generator(config: &RunConfig) -> Result<Network, CliError> {
    let mut generator = config.arch.build(config.seed)?.generator;
    let state = read_params(&config.checkpoint.join(GENERATOR_FILE), ParamRole::Generator)?;
    generator
        .load_state(&state)
        .map_err(|e| CliError::Runtime(format!("checkpoint {}: {e}", config.checkpoint.display())))?;
    Ok(generator)
}

pub fn cmd_sample(config: &RunConfig) -> Result<PathBuf, CliError> {
    let generator = load_generator(config)?;
    let images = sample_batch(&generator, config, config.rows * config.cols, SAMPLE_STREAM)?;
    fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join(SAMPLES_FILE);
    write_grid(&path, &images, config.rows, config.cols)?;
    Ok(path)
}

/// Generator inputs for a sweep: row `r` fixes one draw of every code, column
/// `j` overrides the swept code with its `j`-th value.
pub fn sweep_inputs(config: &RunConfig) -> Result<Tensor, CliError> {
    let latent = &config.arch.latent;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SWEEP_STREAM));
    let bases = sample_codes(latent, config.rows, &mut rng)?;
    let (lo, hi) = config.range;
    let mut samples = Vec::with_capacity(config.rows * config.cols);
    for base in &bases {
        for j in 0..config.cols {
            let mut s = base.clone();
            match config.code {
                CodeRef::Continuous(i) => {
                    let t = if config.cols == 1 { 0.0 } else { j as f64 / (config.cols - 1) as f64 };
                    s.continuous[i] = lo + (hi - lo) * t;
                }
                CodeRef::Discrete(i) => {
                    let k = latent.discrete[i];
                    s.discrete[i] = infogan_dp::models::one_hot(j % k, k);
                }
            }
            samples.push(s);
        }
    }
    Ok(CodeBatch::new(latent, &samples)?.generator_input)
}

pub fn sweep_file(code: CodeRef) -> String {
    format!("sweep-{code}.pgm")
}

pub fn cmd_sweep(config: &RunConfig) -> Result<PathBuf, CliError> {
    let generator = load_generator(config)?;
    let images = generator.evaluate(&sweep_inputs(config)?, Mode::Eval)?;
    fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join(sweep_file(config.code));
    write_grid(&path, &images, config.rows, config.cols)?;
    Ok(path)
}

pub fn cmd_inspect_privacy(config: &RunConfig) -> Result<String, CliError> {
    let text = fs::read_to_string(&config.ledger)
        .map_err(|e| CliError::Runtime(format!("cannot read ledger {}: {e}", config.ledger.display())))?;
    let file = LedgerFile::parse(&text).map_err(|e| CliError::Runtime(format!("ledger: {e}")))?;
    Ok(privacy_report(&file, config.report_delta)?)
}
