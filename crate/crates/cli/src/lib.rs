//! Command-line driver for the robust-spiking-network pipeline:
//! train an analog network, convert it to a spiking one, finetune the
//! spiking network adversarially, attack it with surrogate-gradient
//! ensembles, evaluate, and summarize run directories.

pub mod commands;
pub mod config;

use clap::{Args, Parser, Subcommand};
use config::{CliError, Config};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "rsnn",
    version,
    about = "Robust spiking networks: train, convert, finetune, attack, evaluate, report"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an analog network naturally or adversarially (at/trades/mart)
    TrainAnn(TrainAnnArgs),
    /// Convert an analog checkpoint to a spiking one (threshold calibration)
    Convert(ConvertArgs),
    /// Adversarially finetune a spiking checkpoint with surrogate gradients
    Finetune(FinetuneArgs),
    /// Attack a checkpoint with a surrogate-gradient ensemble
    Attack(AttackArgs),
    /// Clean accuracy (and spiking activity) of a checkpoint
    Eval(EvalArgs),
    /// Summarize a run directory into markdown + plot CSVs
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Config file: `key = value` lines under `[section]` headers; flags
    /// override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for this run
    #[arg(long)]
    out: Option<String>,
    /// Seed for every random draw in the run
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset: mnist or cifar10
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the raw dataset files
    #[arg(long)]
    data_dir: Option<String>,
    /// Use only the first N training samples (0 = all)
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N evaluation samples (0 = all)
    #[arg(long)]
    eval_limit: Option<usize>,
}

impl Common {
    fn build(&self) -> Result<Config, CliError> {
        let mut cfg = Config::from_file(self.config.as_deref())?;
        cfg.set_opt("run.out_dir", self.out.as_ref());
        cfg.set_opt("run.seed", self.seed);
        cfg.set_opt("data.name", self.dataset.as_ref());
        cfg.set_opt("data.dir", self.data_dir.as_ref());
        cfg.set_opt("data.train_limit", self.train_limit);
        cfg.set_opt("data.eval_limit", self.eval_limit);
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainAnnArgs {
    #[command(flatten)]
    common: Common,
    /// Architecture name (mlp-small, conv-small, ...)
    #[arg(long)]
    arch: Option<String>,
    /// Training objective: natural, at, trades, or mart
    #[arg(long)]
    objective: Option<String>,
    /// l∞ budget on the raw pixel scale
    #[arg(long)]
    epsilon: Option<f32>,
    /// Consistency weight for trades/mart
    #[arg(long)]
    lambda: Option<f32>,
    /// Inner maximization steps
    #[arg(long)]
    inner_steps: Option<usize>,
    /// Inner step size (0 = 2.5·ε/steps)
    #[arg(long)]
    eta: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Learning-rate schedule: cosine-anneal or constant
    #[arg(long)]
    schedule: Option<String>,
    /// Random crop (+ flip on cifar10) augmentation
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    augment: Option<bool>,
    /// Eval-set prefix attacked per epoch for the robust metric (0 = off)
    #[arg(long)]
    robust_eval: Option<usize>,
}

impl TrainAnnArgs {
    fn into_config(self) -> Result<Config, CliError> {
        let mut cfg = self.common.build()?;
        cfg.set_opt("model.arch", self.arch);
        cfg.set_opt("objective.kind", self.objective);
        cfg.set_opt("objective.epsilon", self.epsilon);
        cfg.set_opt("objective.lambda", self.lambda);
        cfg.set_opt("objective.inner_steps", self.inner_steps);
        cfg.set_opt("objective.eta", self.eta);
        cfg.set_opt("train.epochs", self.epochs);
        cfg.set_opt("train.batch_size", self.batch);
        cfg.set_opt("optim.lr", self.lr);
        cfg.set_opt("optim.momentum", self.momentum);
        cfg.set_opt("optim.weight_decay", self.weight_decay);
        cfg.set_opt("optim.schedule", self.schedule);
        cfg.set_opt("data.augment", self.augment);
        cfg.set_opt("train.robust_eval_samples", self.robust_eval);
        Ok(cfg)
    }
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    common: Common,
    /// Analog checkpoint to convert
    #[arg(long)]
    ckpt: Option<String>,
    /// Runtime simulation length T
    #[arg(long)]
    t: Option<usize>,
    /// Membrane leak in (0,1]; 1 = integrate-and-fire
    #[arg(long)]
    tau: Option<f32>,
    /// Reset rule: hard or soft
    #[arg(long)]
    reset: Option<String>,
    /// Input encoding: direct or poisson
    #[arg(long)]
    encoding: Option<String>,
    /// Calibration sequence length
    #[arg(long)]
    tc: Option<usize>,
    /// Activation percentile used for thresholds, in (0,100]
    #[arg(long)]
    rho: Option<f32>,
    /// Post-calibration threshold scale in (0,1]
    #[arg(long)]
    kappa: Option<f32>,
    #[arg(long)]
    calib_batches: Option<usize>,
    #[arg(long)]
    calib_batch: Option<usize>,
}

impl ConvertArgs {
    fn into_config(self) -> Result<Config, CliError> {
        let mut cfg = self.common.build()?;
        cfg.set_opt("io.ckpt", self.ckpt);
        cfg.set_opt("snn.t", self.t);
        cfg.set_opt("snn.tau", self.tau);
        cfg.set_opt("snn.reset", self.reset);
        cfg.set_opt("snn.encoding", self.encoding);
        cfg.set_opt("calib.t_c", self.tc);
        cfg.set_opt("calib.rho", self.rho);
        cfg.set_opt("calib.kappa", self.kappa);
        cfg.set_opt("calib.num_batches", self.calib_batches);
        cfg.set_opt("calib.batch_size", self.calib_batch);
        Ok(cfg)
    }
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Spiking checkpoint to finetune
    #[arg(long)]
    ckpt: Option<String>,
    /// Override the runtime simulation length T
    #[arg(long)]
    t: Option<usize>,
    /// l∞ budget on the raw pixel scale
    #[arg(long)]
    epsilon: Option<f32>,
    /// Random-step magnitude of the single-step adversary (default ε/2)
    #[arg(long)]
    alpha: Option<f32>,
    /// Weight of the consistency term
    #[arg(long)]
    beta: Option<f32>,
    /// Keep firing thresholds fixed during finetuning
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    freeze_thresholds: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Learning-rate schedule: cosine-anneal or constant
    #[arg(long)]
    schedule: Option<String>,
    /// Random crop (+ flip on cifar10) augmentation
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    augment: Option<bool>,
    /// Eval-set prefix attacked per epoch for the robust metric (0 = off)
    #[arg(long)]
    robust_eval: Option<usize>,
}

impl FinetuneArgs {
    fn into_config(self) -> Result<Config, CliError> {
        let mut cfg = self.common.build()?;
        cfg.set_opt("io.ckpt", self.ckpt);
        cfg.set_opt("snn.t", self.t);
        cfg.set_opt("objective.epsilon", self.epsilon);
        cfg.set_opt("objective.alpha", self.alpha);
        cfg.set_opt("objective.beta", self.beta);
        cfg.set_opt("finetune.freeze_thresholds", self.freeze_thresholds);
        cfg.set_opt("train.epochs", self.epochs);
        cfg.set_opt("train.batch_size", self.batch);
        cfg.set_opt("optim.lr", self.lr);
        cfg.set_opt("optim.momentum", self.momentum);
        cfg.set_opt("optim.weight_decay", self.weight_decay);
        cfg.set_opt("optim.schedule", self.schedule);
        cfg.set_opt("data.augment", self.augment);
        cfg.set_opt("train.robust_eval_samples", self.robust_eval);
        Ok(cfg)
    }
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to attack (analog or spiking)
    #[arg(long)]
    ckpt: Option<String>,
    /// Attack algorithm: fgsm, rfgsm, or pgd
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Step size on the raw pixel scale (0 = 2.5·ε/steps)
    #[arg(long)]
    eta: Option<f32>,
    /// Inner loss: ce or kl
    #[arg(long)]
    inner_loss: Option<String>,
    /// Comma-separated ε values, one report per entry
    #[arg(long)]
    eps_grid: Option<String>,
    /// Surrogate set: single, pl5, or full (19 members)
    #[arg(long)]
    ensemble: Option<String>,
    /// Attack every sample with every member (disable early exit)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    full_grid: Option<bool>,
    /// Samples per parallel work unit
    #[arg(long)]
    chunk: Option<usize>,
    /// Evaluation samples to attack (0 = whole eval split)
    #[arg(long)]
    samples: Option<usize>,
    /// Craft on this checkpoint instead (black-box transfer)
    #[arg(long)]
    transfer_source: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    random_start: Option<bool>,
    /// Also run the five gradient-masking checks
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    sanity: Option<bool>,
    /// Near-saturating ε used by the sanity checks
    #[arg(long)]
    large_eps: Option<f32>,
}

impl AttackArgs {
    fn into_config(self) -> Result<Config, CliError> {
        let mut cfg = self.common.build()?;
        cfg.set_opt("io.ckpt", self.ckpt);
        cfg.set_opt("attack.algo", self.attack);
        cfg.set_opt("attack.steps", self.steps);
        cfg.set_opt("attack.eta", self.eta);
        cfg.set_opt("attack.inner_loss", self.inner_loss);
        cfg.set_opt("attack.eps_grid", self.eps_grid);
        cfg.set_opt("attack.ensemble", self.ensemble);
        cfg.set_opt("attack.full_grid", self.full_grid);
        cfg.set_opt("attack.chunk", self.chunk);
        cfg.set_opt("attack.samples", self.samples);
        cfg.set_opt("attack.transfer_source", self.transfer_source);
        cfg.set_opt("attack.random_start", self.random_start);
        cfg.set_opt("attack.sanity", self.sanity);
        cfg.set_opt("attack.large_eps", self.large_eps);
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: Option<String>,
    /// Evaluation samples (0 = whole eval split)
    #[arg(long)]
    samples: Option<usize>,
    /// Evaluation chunk size (bounds peak memory)
    #[arg(long)]
    chunk: Option<usize>,
    /// Samples used for spiking-activity measurement (0 = skip)
    #[arg(long)]
    spike_samples: Option<usize>,
}

impl EvalArgs {
    fn into_config(self) -> Result<Config, CliError> {
        let mut cfg = self.common.build()?;
        cfg.set_opt("io.ckpt", self.ckpt);
        cfg.set_opt("eval.samples", self.samples);
        cfg.set_opt("eval.chunk", self.chunk);
        cfg.set_opt("eval.spike_samples", self.spike_samples);
        Ok(cfg)
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory to summarize
    run_dir: PathBuf,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::TrainAnn(a) => commands::cmd_train_ann(&a.into_config()?),
        Cmd::Convert(a) => commands::cmd_convert(&a.into_config()?),
        Cmd::Finetune(a) => commands::cmd_finetune(&a.into_config()?),
        Cmd::Attack(a) => commands::cmd_attack(&a.into_config()?),
        Cmd::Eval(a) => commands::cmd_eval(&a.into_config()?),
        Cmd::Report(a) => commands::cmd_report(&a.run_dir),
    }
}

/// Parse and run. Returns the process exit code: 0 for success, 1 for a
/// runtime failure, 2 for a usage or configuration error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
