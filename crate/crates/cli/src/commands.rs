//! The six pipeline commands. Each one resolves its configuration (defaults
//! < config file < flags), persists the resolved key set next to its
//! outputs, runs the corresponding core routine, and writes plot-ready
//! artifacts (checkpoints, CSV, JSON, markdown).

use crate::config::{runtime, usage, CliError, Config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsnn_core::attack::{
    run_ensemble, sanity_suite, transfer_attack, AttackAlgo, AttackError, AttackReport,
    AttackSpec, EnsembleOptions,
};
use rsnn_core::ckpt::{self, CkptError, CkptMeta, Provenance};
use rsnn_core::convert::{convert, CalibrationConfig, ConvertError};
use rsnn_core::data::{
    load_cifar_binary, load_idx_pair, make_batch, shuffled_indices, Dataset, Normalization,
};
use rsnn_core::nn::{build_arch, NetMode, Network, StatsMode};
use rsnn_core::snn::{snn_logits, Encoding, ResetKind, SnnConfig};
use rsnn_core::surrogate::{ensemble_grid, SurrogateSpec};
use rsnn_core::tensor::Tensor;
use rsnn_core::train::adv::{InnerLoss, ModelView};
use rsnn_core::train::{
    eval_clean_accuracy, finetune_snn_robust, history_csv, reestimate_running_stats,
    train_ann_robust, ObjectiveKind, OptimConfig, RobustObjective, Schedule, TrainError,
    TrainSetup,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Once;

pub const OUT_ROOT_ENV: &str = "RSNN_OUT_ROOT";
pub const THREADS_ENV: &str = "RSNN_THREADS";

const DEFAULT_EPSILON: f32 = 8.0 / 255.0;

fn map_train(e: TrainError) -> CliError {
    match e {
        TrainError::Objective(_) => usage(e),
        other => runtime(other),
    }
}

fn map_convert(e: ConvertError) -> CliError {
    match e {
        ConvertError::Config(_) => usage(e),
        other => runtime(other),
    }
}

fn map_attack(e: AttackError) -> CliError {
    match e {
        AttackError::Config(_) | AttackError::ShapeMismatch { .. } => usage(e),
        other => runtime(other),
    }
}

fn map_ckpt(e: CkptError) -> CliError {
    match e {
        CkptError::ModeMismatch { .. } | CkptError::Config(_) => usage(e),
        other => runtime(other),
    }
}

/// Honor the global thread cap once per process.
fn init_threads() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

/// Resolve and create the run directory. Relative paths land under the
/// output-root override when that environment variable is set.
fn prepare_out(cfg: &Config, command: &str) -> Result<PathBuf, CliError> {
    init_threads();
    let out = cfg.get_str("run.out_dir", &format!("runs/{command}"));
    let mut dir = PathBuf::from(&out);
    if dir.is_relative() {
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            dir = PathBuf::from(root).join(dir);
        }
    }
    std::fs::create_dir_all(&dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

struct Data {
    train: Dataset,
    eval: Dataset,
    norm: Normalization,
}

fn load_data(cfg: &Config) -> Result<Data, CliError> {
    let name = cfg.get_str("data.name", "mnist");
    let dir = PathBuf::from(cfg.get_str("data.dir", &format!("data/{name}")));
    let (mut train, mut eval, norm) = match name.as_str() {
        "mnist" => {
            let train = load_idx_pair(
                &dir.join("train-images-idx3-ubyte.gz"),
                &dir.join("train-labels-idx1-ubyte.gz"),
                10,
            )
            .map_err(usage)?;
            let eval = load_idx_pair(
                &dir.join("t10k-images-idx3-ubyte.gz"),
                &dir.join("t10k-labels-idx1-ubyte.gz"),
                10,
            )
            .map_err(usage)?;
            (train, eval, Normalization::mnist())
        }
        "cifar10" => {
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect();
            let train = load_cifar_binary(&batches, 10).map_err(usage)?;
            let eval = load_cifar_binary(&[dir.join("test_batch.bin")], 10).map_err(usage)?;
            (train, eval, Normalization::cifar10())
        }
        other => {
            return Err(usage(format!(
                "unknown dataset `{other}` (expected mnist or cifar10)"
            )))
        }
    };
    let train_limit = cfg.get::<usize>("data.train_limit", 0)?;
    if train_limit > 0 {
        train = train.slice(0, train_limit);
    }
    let eval_limit = cfg.get::<usize>("data.eval_limit", 0)?;
    if eval_limit > 0 {
        eval = eval.slice(0, eval_limit);
    }
    Ok(Data { train, eval, norm })
}

fn augment_from(cfg: &Config, dataset: &str) -> Result<Option<(usize, bool)>, CliError> {
    let enabled = cfg.get_bool("data.augment", false)?;
    if !enabled {
        return Ok(None);
    }
    let default_pad = if dataset == "cifar10" { 4 } else { 2 };
    let pad = cfg.get::<usize>("data.pad", default_pad)?;
    let flip = cfg.get_bool("data.flip", dataset == "cifar10")?;
    Ok(Some((pad, flip)))
}

fn schedule_from(cfg: &Config) -> Result<Schedule, CliError> {
    match cfg.get_str("optim.schedule", "cosine-anneal").as_str() {
        "cosine-anneal" => Ok(Schedule::CosineAnneal),
        "constant" => Ok(Schedule::Constant),
        other => Err(usage(format!(
            "unknown schedule `{other}` (expected cosine-anneal or constant)"
        ))),
    }
}

fn optim_from(cfg: &Config, epochs: usize, default_lr: f32) -> Result<OptimConfig, CliError> {
    let lr = cfg.get::<f32>("optim.lr", default_lr)?;
    let momentum = cfg.get::<f32>("optim.momentum", 0.9)?;
    let weight_decay = cfg.get::<f32>("optim.weight_decay", 5e-4)?;
    let schedule = schedule_from(cfg)?;
    OptimConfig::new(lr, momentum, weight_decay, epochs, schedule).map_err(usage)
}

fn train_objective_from(cfg: &Config) -> Result<RobustObjective, CliError> {
    let kind = cfg.get_str("objective.kind", "natural");
    let epsilon = cfg.get::<f32>("objective.epsilon", DEFAULT_EPSILON)?;
    let mut obj = match kind.as_str() {
        "natural" => RobustObjective::natural(),
        "at" => RobustObjective::at(epsilon),
        "trades" => RobustObjective::trades(epsilon, cfg.get::<f32>("objective.lambda", 6.0)?),
        "mart" => RobustObjective::mart(epsilon, cfg.get::<f32>("objective.lambda", 6.0)?),
        "conv-finetune" => {
            return Err(usage(
                "objective conv-finetune belongs to the finetune command",
            ))
        }
        other => Err(usage(format!(
            "unknown objective `{other}` (expected natural, at, trades, or mart)"
        )))?,
    };
    if obj.kind != ObjectiveKind::Natural {
        obj.inner_steps = cfg.get::<usize>("objective.inner_steps", obj.inner_steps)?;
        obj.eta = cfg.get::<f32>("objective.eta", obj.eta)?;
    }
    obj.validate().map_err(map_train)?;
    Ok(obj)
}

fn load_model(cfg: &Config) -> Result<(Network, CkptMeta, PathBuf), CliError> {
    let path = PathBuf::from(cfg.require_str("io.ckpt", "pass --ckpt <file>")?);
    let (net, meta) = ckpt::load(&path).map_err(map_ckpt)?;
    Ok((net, meta, path))
}

fn view_of<'a>(net: &'a Network, meta: &'a CkptMeta) -> ModelView<'a> {
    match meta.mode {
        NetMode::Ann => ModelView::ann(net, StatsMode::Running),
        NetMode::Snn => ModelView::snn(net, meta.snn.as_ref().expect("validated"), StatsMode::Running),
    }
}

pub fn cmd_train_ann(cfg: &Config) -> Result<(), CliError> {
    let out = prepare_out(cfg, "train-ann")?;
    let data = load_data(cfg)?;
    let dataset_name = cfg.get_str("data.name", "mnist");
    let arch = cfg.get_str("model.arch", "mlp-small");
    let seed = cfg.get::<u64>("run.seed", 0)?;
    let objective = train_objective_from(cfg)?;
    let epochs = cfg.get::<usize>("train.epochs", 10)?;
    let optim = optim_from(cfg, epochs, 0.1)?;
    let setup = TrainSetup {
        train: &data.train,
        eval: &data.eval,
        norm: &data.norm,
        batch_size: cfg.get::<usize>("train.batch_size", 64)?,
        augment: augment_from(cfg, &dataset_name)?,
        eval_batch: cfg.get::<usize>("train.eval_batch", 256)?,
        robust_eval_samples: cfg.get::<usize>("train.robust_eval_samples", 512)?,
    };
    cfg.write_resolved(&out, "train-ann")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net =
        build_arch(&arch, data.train.shape, data.train.num_classes, &mut rng).map_err(usage)?;
    let report = train_ann_robust(&mut net, &setup, &objective, &optim, seed, None)
        .map_err(map_train)?;

    write_file(&out.join("history.csv"), &history_csv(&report.history))?;
    let prov = Provenance::new(objective.kind, objective.epsilon, seed, epochs);
    ckpt::save(&net, None, &prov, &out.join("model.ckpt")).map_err(map_ckpt)?;
    let last = report.history.last();
    println!(
        "train-ann: {arch} ({}) epochs={epochs} clean={:.4} robust={} -> {}",
        cfg.get_str("objective.kind", "natural"),
        last.map(|r| r.clean_acc).unwrap_or(0.0),
        last.and_then(|r| r.robust_acc)
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

/// Normalized calibration batches drawn from the training split.
fn calibration_batches(
    data: &Data,
    num_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA11B);
    let order = shuffled_indices(data.train.len(), &mut rng);
    order
        .chunks(batch_size.max(2))
        .take(num_batches.max(1))
        .map(|idx| make_batch(&data.train, idx, &data.norm, None, &mut rng).0)
        .collect()
}

pub fn cmd_convert(cfg: &Config) -> Result<(), CliError> {
    let out = prepare_out(cfg, "convert")?;
    let (ann, meta, ckpt_path) = load_model(cfg)?;
    meta.require_mode(NetMode::Ann).map_err(map_ckpt)?;
    let data = load_data(cfg)?;
    let seed = cfg.get::<u64>("run.seed", 0)?;

    let reset = match cfg.get_str("snn.reset", "hard").as_str() {
        "hard" => ResetKind::Hard,
        "soft" => ResetKind::Soft,
        other => return Err(usage(format!("unknown reset `{other}` (hard or soft)"))),
    };
    let encoding = match cfg.get_str("snn.encoding", "direct").as_str() {
        "direct" => Encoding::Direct,
        "poisson" => Encoding::Poisson,
        other => return Err(usage(format!("unknown encoding `{other}` (direct or poisson)"))),
    };
    let snn_cfg = SnnConfig::new(
        cfg.get::<usize>("snn.t", 8)?,
        cfg.get::<f32>("snn.tau", 1.0)?,
        reset,
        encoding,
        SurrogateSpec::training_default(),
    )
    .map_err(usage)?;
    let cal = CalibrationConfig {
        t_c: cfg.get::<usize>("calib.t_c", 100)?,
        num_batches: cfg.get::<usize>("calib.num_batches", 10)?,
        batch_size: cfg.get::<usize>("calib.batch_size", 64)?,
        rho: cfg.get::<f32>("calib.rho", 99.7)?,
        kappa: cfg.get::<f32>("calib.kappa", 0.3)?,
    };
    cal.validate(snn_cfg.t).map_err(map_convert)?;
    cfg.write_resolved(&out, "convert")?;

    let batches = calibration_batches(&data, cal.num_batches, cal.batch_size, seed);
    let (mut snn, thresholds) = convert(&ann, &batches, &cal, &snn_cfg).map_err(map_convert)?;
    reestimate_running_stats(&mut snn, &batches, Some(&snn_cfg)).map_err(map_train)?;

    let mut csv = String::from("layer,v_th\n");
    for (layer, v_th) in &thresholds {
        csv.push_str(&format!("{layer},{v_th}\n"));
    }
    write_file(&out.join("calibration.csv"), &csv)?;

    let prov = Provenance {
        objective: meta.provenance.objective,
        epsilon: meta.provenance.epsilon,
        seed,
        epochs: 0,
        source_sha256: Some(ckpt::sha256_hex(&ckpt_path).map_err(map_ckpt)?),
    };
    ckpt::save(&snn, Some(&snn_cfg), &prov, &out.join("model.ckpt")).map_err(map_ckpt)?;
    println!(
        "convert: {} -> spiking T={} ({} thresholds calibrated) -> {}",
        meta.arch,
        snn_cfg.t,
        thresholds.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_finetune(cfg: &Config) -> Result<(), CliError> {
    let out = prepare_out(cfg, "finetune")?;
    let (mut net, meta, ckpt_path) = load_model(cfg)?;
    meta.require_mode(NetMode::Snn).map_err(map_ckpt)?;
    let stored = meta.snn.expect("snn checkpoint carries its config");
    let snn_cfg = SnnConfig::new(
        cfg.get::<usize>("snn.t", stored.t)?,
        stored.tau,
        stored.reset,
        stored.encoding,
        stored.surrogate,
    )
    .map_err(usage)?;
    let data = load_data(cfg)?;
    let dataset_name = cfg.get_str("data.name", "mnist");
    let seed = cfg.get::<u64>("run.seed", 0)?;

    let epsilon = cfg.get::<f32>("objective.epsilon", DEFAULT_EPSILON)?;
    let beta = cfg.get::<f32>("objective.beta", 2.0)?;
    let mut objective = RobustObjective::conv_finetune(epsilon, beta);
    objective.alpha = cfg.get::<f32>("objective.alpha", objective.alpha)?;
    objective.validate().map_err(map_train)?;
    let freeze = cfg.get_bool("finetune.freeze_thresholds", false)?;
    let epochs = cfg.get::<usize>("train.epochs", 5)?;
    let optim = optim_from(cfg, epochs, 0.01)?;
    let setup = TrainSetup {
        train: &data.train,
        eval: &data.eval,
        norm: &data.norm,
        batch_size: cfg.get::<usize>("train.batch_size", 64)?,
        augment: augment_from(cfg, &dataset_name)?,
        eval_batch: cfg.get::<usize>("train.eval_batch", 256)?,
        robust_eval_samples: cfg.get::<usize>("train.robust_eval_samples", 256)?,
    };
    cfg.write_resolved(&out, "finetune")?;

    let report = finetune_snn_robust(
        &mut net, &setup, &objective, &optim, &snn_cfg, freeze, seed, None,
    )
    .map_err(map_train)?;

    write_file(&out.join("history.csv"), &history_csv(&report.history))?;
    let prov = Provenance::new(ObjectiveKind::ConvFinetune, epsilon, seed, epochs)
        .derived_from(ckpt::sha256_hex(&ckpt_path).map_err(map_ckpt)?);
    ckpt::save(&net, Some(&snn_cfg), &prov, &out.join("model.ckpt")).map_err(map_ckpt)?;
    let last = report.history.last();
    println!(
        "finetune: T={} epochs={epochs} eps={epsilon} beta={beta} clean={:.4} robust={} -> {}",
        snn_cfg.t,
        last.map(|r| r.clean_acc).unwrap_or(0.0),
        last.and_then(|r| r.robust_acc)
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

fn surrogates_from(cfg: &Config) -> Result<Vec<SurrogateSpec>, CliError> {
    match cfg.get_str("attack.ensemble", "single").as_str() {
        "single" => Ok(vec![SurrogateSpec::training_default()]),
        "pl5" => Ok(ensemble_grid()[..5].to_vec()),
        "full" => Ok(ensemble_grid()),
        other => Err(usage(format!(
            "unknown ensemble `{other}` (expected single, pl5, or full)"
        ))),
    }
}

pub fn cmd_attack(cfg: &Config) -> Result<(), CliError> {
    let out = prepare_out(cfg, "attack")?;
    let (net, meta, ckpt_path) = load_model(cfg)?;
    let view = view_of(&net, &meta);
    let data = load_data(cfg)?;
    let seed = cfg.get::<u64>("run.seed", 0)?;

    let algo = match cfg.get_str("attack.algo", "pgd").as_str() {
        "fgsm" => AttackAlgo::Fgsm,
        "rfgsm" => AttackAlgo::Rfgsm,
        "pgd" => AttackAlgo::Pgd,
        other => {
            return Err(usage(format!(
                "unknown attack `{other}` (expected fgsm, rfgsm, or pgd)"
            )))
        }
    };
    let single_step = !matches!(algo, AttackAlgo::Pgd);
    let steps = cfg.get::<usize>("attack.steps", if single_step { 1 } else { 20 })?;
    let eta = cfg.get::<f32>("attack.eta", 0.0)?;
    let inner_loss = match cfg
        .get_str(
            "attack.inner_loss",
            if matches!(algo, AttackAlgo::Rfgsm) { "kl" } else { "ce" },
        )
        .as_str()
    {
        "ce" => InnerLoss::Ce,
        "kl" => InnerLoss::Kl,
        other => return Err(usage(format!("unknown inner loss `{other}` (ce or kl)"))),
    };
    let random_start = cfg.get_bool("attack.random_start", !matches!(algo, AttackAlgo::Fgsm))?;
    let surrogates = surrogates_from(cfg)?;
    let eps_grid = cfg.get_f32_list("attack.eps_grid", &[DEFAULT_EPSILON])?;
    let opts = EnsembleOptions {
        seed,
        chunk: cfg.get::<usize>("attack.chunk", 100)?,
        full_grid: cfg.get_bool("attack.full_grid", false)?,
    };
    let samples = cfg.get::<usize>("attack.samples", 0)?;
    let ds = if samples > 0 {
        data.eval.slice(0, samples)
    } else {
        data.eval.slice(0, data.eval.len())
    };

    let source_path = cfg.get_opt("attack.transfer_source");
    let source = source_path
        .as_ref()
        .map(|p| ckpt::load(Path::new(p)).map_err(map_ckpt))
        .transpose()?;
    let run_sanity = cfg.get_bool("attack.sanity", false)?;
    let large_eps = cfg.get::<f32>("attack.large_eps", 0.5)?;
    cfg.write_resolved(&out, "attack")?;

    let model_label = ckpt_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut summary = String::from(AttackReport::csv_header());
    summary.push('\n');
    for (i, &eps) in eps_grid.iter().enumerate() {
        let spec = AttackSpec {
            algo,
            epsilon: eps,
            steps,
            eta,
            inner_loss,
            random_start,
            surrogates: surrogates.clone(),
        };
        spec.validate().map_err(map_attack)?;
        let report = match &source {
            Some((src_net, src_meta)) => {
                let src_view = view_of(src_net, src_meta);
                transfer_attack(&src_view, &view, &ds, &data.norm, &spec, &opts)
                    .map_err(map_attack)?
            }
            None => run_ensemble(&view, &ds, &data.norm, &spec, &opts).map_err(map_attack)?,
        };
        write_file(&out.join(format!("attack-{i:03}.json")), &report.to_json())?;
        summary.push_str(&report.csv_row(&model_label));
        summary.push('\n');
        println!(
            "attack: {} eps={eps} members={} clean={:.4} robust={:.4} strongest={}",
            spec.algo,
            spec.surrogates.len(),
            report.clean_accuracy,
            report.robust_accuracy,
            report.strongest_member
        );
    }
    write_file(&out.join("summary.csv"), &summary)?;

    if run_sanity {
        let bb = source.as_ref().map(|(n, m)| (n, m));
        let bb_view = bb.map(|(n, m)| view_of(n, m));
        let report = sanity_suite(
            &view,
            bb_view.as_ref(),
            &ds,
            &data.norm,
            &eps_grid,
            large_eps,
            steps.max(5),
            SurrogateSpec::training_default(),
            &opts,
        )
        .map_err(map_attack)?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| runtime(format!("sanity report serialization: {e}")))?;
        write_file(&out.join("sanity.json"), &json)?;
        println!(
            "attack: sanity checks -> {} warning(s)",
            report.warnings.len()
        );
    }
    Ok(())
}

pub fn cmd_eval(cfg: &Config) -> Result<(), CliError> {
    let out = prepare_out(cfg, "eval")?;
    let (net, meta, _) = load_model(cfg)?;
    let view = view_of(&net, &meta);
    let data = load_data(cfg)?;
    let samples = cfg.get::<usize>("eval.samples", 0)?;
    let ds = if samples > 0 {
        data.eval.slice(0, samples)
    } else {
        data.eval.slice(0, data.eval.len())
    };
    let chunk = cfg.get::<usize>("eval.chunk", 256)?;
    let spike_samples = cfg.get::<usize>("eval.spike_samples", 256)?;
    cfg.write_resolved(&out, "eval")?;

    let clean = eval_clean_accuracy(&view, &ds, &data.norm, chunk).map_err(map_train)?;

    #[derive(serde::Serialize)]
    struct LayerSpikes {
        layer: usize,
        spikes: f64,
        possible: u64,
        rate: f64,
    }
    #[derive(serde::Serialize)]
    struct EvalOut {
        arch: String,
        mode: NetMode,
        samples: usize,
        clean_accuracy: f64,
        spikes: Option<Vec<LayerSpikes>>,
    }

    let spikes = if meta.mode == NetMode::Snn && spike_samples > 0 {
        let snn_cfg = meta.snn.expect("snn checkpoint carries its config");
        let probe = ds.slice(0, spike_samples.min(ds.len()));
        let mut per_layer: BTreeMap<usize, (f64, u64)> = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx: Vec<usize> = (0..probe.len()).collect();
        for part in idx.chunks(chunk.max(2)) {
            let (x, _) = make_batch(&probe, part, &data.norm, None, &mut rng);
            let (_, counts) =
                snn_logits(&net, &x, &snn_cfg, StatsMode::Running).map_err(runtime)?;
            for c in counts {
                let e = per_layer.entry(c.layer).or_insert((0.0, 0));
                e.0 += c.spikes;
                e.1 += c.possible;
            }
        }
        let rows: Vec<LayerSpikes> = per_layer
            .into_iter()
            .map(|(layer, (spikes, possible))| LayerSpikes {
                layer,
                spikes,
                possible,
                rate: if possible > 0 { spikes / possible as f64 } else { 0.0 },
            })
            .collect();
        let mut csv = String::from("layer,spikes,possible,rate\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{:.6}\n",
                r.layer, r.spikes, r.possible, r.rate
            ));
        }
        write_file(&out.join("spikes.csv"), &csv)?;
        Some(rows)
    } else {
        None
    };

    let payload = EvalOut {
        arch: meta.arch.clone(),
        mode: meta.mode,
        samples: ds.len(),
        clean_accuracy: clean,
        spikes,
    };
    let json = serde_json::to_string_pretty(&payload)
        .map_err(|e| runtime(format!("eval serialization: {e}")))?;
    write_file(&out.join("eval.json"), &json)?;
    println!(
        "eval: {} ({:?}) clean={clean:.4} over {} samples -> {}",
        meta.arch,
        meta.mode,
        ds.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_report(run_dir: &Path) -> Result<(), CliError> {
    if !run_dir.is_dir() {
        return Err(usage(format!("{} is not a directory", run_dir.display())));
    }
    let mut names: Vec<String> = std::fs::read_dir(run_dir)
        .map_err(|e| runtime(format!("cannot read {}: {e}", run_dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();

    let mut md = String::from("# Run report\n");
    let mut found = false;

    let configs: Vec<&String> = names
        .iter()
        .filter(|n| n.starts_with("resolved-") && n.ends_with(".cfg"))
        .collect();
    if !configs.is_empty() {
        md.push_str("\n## Configuration\n\n");
        for c in configs {
            md.push_str(&format!("- `{c}`\n"));
        }
    }

    if names.iter().any(|n| n == "history.csv") {
        found = true;
        let text = std::fs::read_to_string(run_dir.join("history.csv"))
            .map_err(|e| runtime(format!("history.csv: {e}")))?;
        let rows: Vec<&str> = text.lines().collect();
        md.push_str("\n## Training\n\n");
        if rows.len() > 1 {
            md.push_str(&format!("{} epochs recorded in `history.csv`.\n\n", rows.len() - 1));
            md.push_str("```\n");
            md.push_str(rows[0]);
            md.push('\n');
            md.push_str(rows[1]);
            md.push('\n');
            if rows.len() > 2 {
                md.push_str(rows[rows.len() - 1]);
                md.push('\n');
            }
            md.push_str("```\n");
        } else {
            md.push_str("`history.csv` holds no epochs.\n");
        }
    }

    let attack_files: Vec<&String> = names
        .iter()
        .filter(|n| n.starts_with("attack-") && n.ends_with(".json"))
        .collect();
    if !attack_files.is_empty() {
        found = true;
        let mut curve = String::from("epsilon,clean_accuracy,robust_accuracy\n");
        let mut members_csv = String::from("epsilon,surrogate,robust_accuracy,fooled\n");
        md.push_str("\n## Attacks\n\n");
        md.push_str("| ε | algo | members | clean | robust | strongest member |\n");
        md.push_str("|---|------|---------|-------|--------|------------------|\n");
        for name in &attack_files {
            let text = std::fs::read_to_string(run_dir.join(name))
                .map_err(|e| runtime(format!("{name}: {e}")))?;
            let report: AttackReport = serde_json::from_str(&text)
                .map_err(|e| runtime(format!("{name}: not an attack report: {e}")))?;
            if report.recompute_robust() != report.robust {
                return Err(runtime(format!(
                    "{name}: stored aggregate does not equal AND over member bitmaps"
                )));
            }
            curve.push_str(&format!(
                "{},{:.6},{:.6}\n",
                report.epsilon, report.clean_accuracy, report.robust_accuracy
            ));
            for m in &report.members {
                members_csv.push_str(&format!(
                    "{},{},{},{}\n",
                    report.epsilon,
                    m.surrogate,
                    m.robust_accuracy
                        .map(|v| format!("{v:.6}"))
                        .unwrap_or_default(),
                    m.fooled
                ));
            }
            md.push_str(&format!(
                "| {} | {} | {} | {:.4} | {:.4} | {} |\n",
                report.epsilon,
                report.algo,
                report.members.len(),
                report.clean_accuracy,
                report.robust_accuracy,
                report.strongest_member
            ));
        }
        md.push_str(&format!(
            "\nAggregate robustness re-derived as AND over member bitmaps: verified for {} report(s).\n",
            attack_files.len()
        ));
        write_file(&run_dir.join("robust-vs-eps.csv"), &curve)?;
        write_file(&run_dir.join("members.csv"), &members_csv)?;
    }

    if names.iter().any(|n| n == "eval.json") {
        found = true;
        let text = std::fs::read_to_string(run_dir.join("eval.json"))
            .map_err(|e| runtime(format!("eval.json: {e}")))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| runtime(format!("eval.json: {e}")))?;
        md.push_str("\n## Evaluation\n\n");
        md.push_str(&format!(
            "- model: {} ({})\n- clean accuracy: {:.4} over {} samples\n",
            v["arch"].as_str().unwrap_or("?"),
            v["mode"].as_str().unwrap_or("?"),
            v["clean_accuracy"].as_f64().unwrap_or(f64::NAN),
            v["samples"].as_u64().unwrap_or(0)
        ));
        if let Some(rows) = v["spikes"].as_array() {
            md.push_str("\nPer-layer firing rates (`spikes.csv`):\n\n| layer | rate |\n|-------|------|\n");
            for r in rows {
                md.push_str(&format!(
                    "| {} | {:.4} |\n",
                    r["layer"].as_u64().unwrap_or(0),
                    r["rate"].as_f64().unwrap_or(f64::NAN)
                ));
            }
        }
    }

    if names.iter().any(|n| n == "sanity.json") {
        found = true;
        let text = std::fs::read_to_string(run_dir.join("sanity.json"))
            .map_err(|e| runtime(format!("sanity.json: {e}")))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| runtime(format!("sanity.json: {e}")))?;
        md.push_str("\n## Gradient-masking checks\n\n");
        match v["warnings"].as_array() {
            Some(w) if !w.is_empty() => {
                for item in w {
                    md.push_str(&format!("- WARNING: {}\n", item.as_str().unwrap_or("?")));
                }
            }
            _ => md.push_str("All five principles hold on this run.\n"),
        }
    }

    if names.iter().any(|n| n == "calibration.csv") {
        found = true;
        md.push_str("\n## Conversion\n\nCalibrated thresholds are in `calibration.csv`.\n");
    }

    if !found {
        return Err(usage(format!(
            "nothing to report: {} holds no history.csv, attack-*.json, eval.json, sanity.json, or calibration.csv",
            run_dir.display()
        )));
    }
    write_file(&run_dir.join("report.md"), &md)?;
    println!("report: wrote {}", run_dir.join("report.md").display());
    Ok(())
}
