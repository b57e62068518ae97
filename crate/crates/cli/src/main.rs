use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use infogan_dp_cli::{run, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "infogan-dp", version, about = "Differentially private InfoGAN training")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one client against a local Q network.
    Train(Opts),
    /// Train several clients against one shared Q service.
    TrainDist(Opts),
    /// Write a grid of random samples from a generator checkpoint.
    Sample(Opts),
    /// Write a grid sweeping one latent code across columns.
    Sweep(Opts),
    /// Print the privacy report of a ledger file.
    InspectPrivacy(Opts),
}

#[derive(Args)]
struct Opts {
    /// Flat `key=value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set privacy.epsilon=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// `mnist` or `tiny`.
    #[arg(long)]
    preset: Option<String>,
    /// IDX image file.
    #[arg(long)]
    images: Option<String>,
    #[arg(long)]
    synth_count: Option<String>,
    #[arg(long)]
    per_client: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    clip_norm: Option<String>,
    #[arg(long)]
    d_iters: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    steps_per_round: Option<String>,
    /// `in-process` or `tcp`.
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    timeout_ms: Option<String>,
    /// Directory holding `generator.params`.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    rows: Option<String>,
    #[arg(long)]
    cols: Option<String>,
    /// `c<i>` for a continuous code, `d<i>` for a discrete one.
    #[arg(long)]
    code: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    range_min: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    range_max: Option<String>,
    #[arg(long)]
    ledger: Option<String>,
}

impl Opts {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        [
            ("output.dir", &self.output),
            ("seed", &self.seed),
            ("model.preset", &self.preset),
            ("data.images", &self.images),
            ("data.synth_count", &self.synth_count),
            ("data.per_client", &self.per_client),
            ("privacy.epsilon", &self.epsilon),
            ("privacy.delta", &self.delta),
            ("privacy.clip_norm", &self.clip_norm),
            ("privacy.d_iters", &self.d_iters),
            ("train.batch_size", &self.batch_size),
            ("train.epochs", &self.epochs),
            ("train.max_steps", &self.max_steps),
            ("train.lambda", &self.lambda),
            ("dist.clients", &self.clients),
            ("dist.rounds", &self.rounds),
            ("dist.steps_per_round", &self.steps_per_round),
            ("dist.transport", &self.transport),
            ("dist.endpoint", &self.endpoint),
            ("dist.timeout_ms", &self.timeout_ms),
            ("grid.checkpoint", &self.checkpoint),
            ("grid.rows", &self.rows),
            ("grid.cols", &self.cols),
            ("sweep.code", &self.code),
            ("sweep.min", &self.range_min),
            ("sweep.max", &self.range_max),
            ("inspect.ledger", &self.ledger),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }

    fn resolve(&self, mode: Command) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::invalid("--config", format!("{}: {e}", path.display())))?;
            config.apply_text(&text)?;
        }
        // Presets replace the whole architecture, so they go before finer settings.
        if let Some(p) = &self.preset {
            config.set("model.preset", p)?;
        }
        for (k, v) in self.overrides().into_iter().filter(|(k, _)| *k != "model.preset") {
            config.set(k, v)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::invalid("--set", format!("expected KEY=VALUE, got `{kv}`")))?;
            config.set(k.trim(), v)?;
        }
        config.mode = mode;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, opts) = match &cli.command {
        Cmd::Train(o) => (Command::Train, o),
        Cmd::TrainDist(o) => (Command::TrainDist, o),
        Cmd::Sample(o) => (Command::Sample, o),
        Cmd::Sweep(o) => (Command::Sweep, o),
        Cmd::InspectPrivacy(o) => (Command::InspectPrivacy, o),
    };
    match opts.resolve(mode).and_then(|c| run(&c)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
