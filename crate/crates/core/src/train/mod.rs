//! Robust training: adversarial ANN training (pure adversarial CE,
//! clean-plus-KL consistency, and misclassification-weighted variants) and
//! post-conversion spiking finetuning against a randomized single-step
//! KL adversary, with shared momentum-SGD machinery.

pub mod adv;
pub mod losses;
pub mod optim;

pub use adv::{
    fgsm_attack, pgd_attack, rfgsm_attack, AdvError, AttackOutcome, InnerLoss, InputSpace,
    ModelView,
};
pub use losses::{
    boosted_cross_entropy, cross_entropy, kl_divergence, kl_per_sample, mart_loss, one_hot,
    trades_loss, true_class_prob,
};
pub use optim::{OptimConfig, OptimError, Schedule, Sgd};

use crate::autograd::{Graph, GraphError, Var};
use crate::data::{make_batch, shuffled_indices, Dataset, Normalization};
use crate::nn::{ann_forward, Layer, NetMode, Network, NnError, StatsMode};
use crate::snn::{
    argmax_rows, encode_direct, temporal_forward, SnnConfig, SnnError, SnnPassOptions,
};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid objective: {0}")]
    Objective(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: training aborted (divergence)")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Adv(#[from] AdvError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Snn(#[from] SnnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Natural,
    At,
    Trades,
    Mart,
    ConvFinetune,
}

/// Robust-training objective: threat budget, inner-maximization shape, and
/// the trade-off weight of the consistency term.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RobustObjective {
    pub kind: ObjectiveKind,
    /// l∞ budget on the raw [0,1] pixel scale.
    pub epsilon: f32,
    /// PGD steps for the inner maximization.
    pub inner_steps: usize,
    /// PGD step size on the raw pixel scale; 0 selects 2.5·ε/steps.
    pub eta: f32,
    /// Random-step magnitude of the single-step adversary (raw scale).
    pub alpha: f32,
    /// λ for the consistency objectives, β for finetuning.
    pub beta_or_lambda: f32,
}

impl RobustObjective {
    pub fn natural() -> Self {
        RobustObjective {
            kind: ObjectiveKind::Natural,
            epsilon: 0.0,
            inner_steps: 0,
            eta: 0.0,
            alpha: 0.0,
            beta_or_lambda: 0.0,
        }
    }

    pub fn at(epsilon: f32) -> Self {
        RobustObjective {
            kind: ObjectiveKind::At,
            epsilon,
            inner_steps: 10,
            eta: 0.0,
            alpha: 0.0,
            beta_or_lambda: 0.0,
        }
    }

    pub fn trades(epsilon: f32, lambda: f32) -> Self {
        RobustObjective {
            kind: ObjectiveKind::Trades,
            epsilon,
            inner_steps: 10,
            eta: 0.0,
            alpha: 0.0,
            beta_or_lambda: lambda,
        }
    }

    pub fn mart(epsilon: f32, lambda: f32) -> Self {
        RobustObjective {
            kind: ObjectiveKind::Mart,
            epsilon,
            inner_steps: 10,
            eta: 0.0,
            alpha: 0.0,
            beta_or_lambda: lambda,
        }
    }

    /// Finetuning objective with α defaulting to ε/2 and β=2 (10-class).
    pub fn conv_finetune(epsilon: f32, beta: f32) -> Self {
        RobustObjective {
            kind: ObjectiveKind::ConvFinetune,
            epsilon,
            inner_steps: 1,
            eta: 0.0,
            alpha: epsilon / 2.0,
            beta_or_lambda: beta,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epsilon < 0.0 {
            return Err(TrainError::Objective(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        match self.kind {
            ObjectiveKind::Natural => {}
            ObjectiveKind::ConvFinetune => {
                if self.epsilon > 0.0 && self.alpha >= self.epsilon {
                    return Err(TrainError::Objective(format!(
                        "random step alpha {} must be < epsilon {}",
                        self.alpha, self.epsilon
                    )));
                }
            }
            _ => {
                if self.inner_steps == 0 {
                    return Err(TrainError::Objective(
                        "adversarial objectives need inner_steps >= 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// PGD step size: explicit η, else the 2.5·ε/steps rule.
    pub fn eta_effective(&self) -> f32 {
        if self.eta > 0.0 {
            self.eta
        } else if self.inner_steps > 0 {
            2.5 * self.epsilon / self.inner_steps as f32
        } else {
            0.0
        }
    }
}

/// One row of training history.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub loss: f64,
    pub loss_main: f64,
    pub loss_reg: Option<f64>,
}

/// History serialized as CSV: one row per epoch, blank cells for metrics a
/// given objective does not produce.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,clean_acc,robust_acc,loss,loss_main,loss_reg\n");
    for r in history {
        let robust = r.robust_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
        let reg = r.loss_reg.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{:.6},{:.6},{}\n",
            r.epoch, r.lr, r.clean_acc, robust, r.loss, r.loss_main, reg
        ));
    }
    out
}

/// Training outcome plus adversary instrumentation.
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Number of attack invocations (training + metric evaluation).
    pub attack_calls: usize,
    /// Total backward passes spent crafting perturbations.
    pub attack_grad_evals: usize,
}

/// Data plumbing for a training run.
pub struct TrainSetup<'a> {
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub norm: &'a Normalization,
    pub batch_size: usize,
    /// (pad, flip) random-crop augmentation for training batches.
    pub augment: Option<(usize, bool)>,
    /// Evaluation chunk size (bounds peak memory).
    pub eval_batch: usize,
    /// Eval-set prefix attacked per epoch for the robust-accuracy metric;
    /// 0 disables the metric.
    pub robust_eval_samples: usize,
}

/// Per-epoch callback, e.g. for checkpoint cadence.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &Network, &EpochRecord);

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| *p == *y)
        .count()
}

/// Fraction of `ds` classified correctly by the view's true forward.
pub fn eval_clean_accuracy(
    view: &ModelView,
    ds: &Dataset,
    norm: &Normalization,
    chunk: usize,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: no augmentation
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = make_batch(ds, part, norm, None, &mut rng);
        let logits = view.logits(&x)?;
        correct += batch_accuracy(&logits, &y);
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

/// Robust accuracy of a prefix of `ds` under a PGD adversary crafted on the
/// same view (correct on the perturbed input).
#[allow(clippy::too_many_arguments)]
pub fn eval_pgd_accuracy(
    view: &ModelView,
    ds: &Dataset,
    norm: &Normalization,
    space: &InputSpace,
    steps: usize,
    eta_raw: f32,
    chunk: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize, usize), TrainError> {
    let mut correct = 0usize;
    let mut calls = 0usize;
    let mut grad_evals = 0usize;
    let eta = space.scale_step(eta_raw, norm);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = make_batch(ds, part, norm, None, rng);
        let out = pgd_attack(view, &x, &y, space, steps, &eta, InnerLoss::Ce, true, rng)?;
        calls += 1;
        grad_evals += out.grad_evals;
        let logits = view.logits(&out.x_adv)?;
        correct += batch_accuracy(&logits, &y);
    }
    Ok((correct as f64 / ds.len().max(1) as f64, calls, grad_evals))
}

/// Loss summands for one batch.
pub struct BatchTerms {
    pub loss: f64,
    pub main: f64,
    pub reg: Option<f64>,
    pub attack_calls: usize,
    pub attack_grad_evals: usize,
}

fn merge_param_grads(
    grads: &mut crate::autograd::Gradients,
    passes: &[&[(String, Var)]],
) -> Vec<(String, Tensor)> {
    let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
    for params in passes {
        for (name, var) in *params {
            if let Some(g) = grads.take(*var) {
                match map.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        map.insert(name.clone(), g);
                    }
                }
            }
        }
    }
    map.into_iter().collect()
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.with_value(v, |t| t.item()) as f64
}

/// Gradients of the robust ANN objective for one batch. Crafting uses the
/// current batch statistics without touching the running estimates; the
/// returned normalization updates come from the pass named by the objective
/// (the clean pass when one exists, otherwise the adversarial pass).
pub fn ann_batch_grads(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    objective: &RobustObjective,
    space: &InputSpace,
    norm: &Normalization,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(String, Tensor)>, Vec<(usize, Vec<f32>, Vec<f32>)>, BatchTerms), TrainError> {
    let mut attack_calls = 0usize;
    let mut attack_grad_evals = 0usize;
    let x_adv = match objective.kind {
        ObjectiveKind::Natural => None,
        ObjectiveKind::At | ObjectiveKind::Mart | ObjectiveKind::Trades => {
            let inner = match objective.kind {
                ObjectiveKind::Trades => InnerLoss::Kl,
                _ => InnerLoss::Ce,
            };
            let view = ModelView::ann(net, StatsMode::Batch);
            let eta = space.scale_step(objective.eta_effective(), norm);
            let out = pgd_attack(
                &view,
                x,
                y,
                space,
                objective.inner_steps,
                &eta,
                inner,
                true,
                rng,
            )?;
            attack_calls += 1;
            attack_grad_evals += out.grad_evals;
            Some(out.x_adv)
        }
        ObjectiveKind::ConvFinetune => {
            return Err(TrainError::Objective(
                "finetuning objective requires the spiking trainer".into(),
            ))
        }
    };

    let g = Graph::new();
    let lambda = objective.beta_or_lambda;
    let (loss, main, reg, grads, bn_updates) = match objective.kind {
        ObjectiveKind::Natural => {
            let xv = g.leaf(x.clone(), false);
            let pass = ann_forward(&g, net, xv, StatsMode::Batch, true)?;
            let loss = cross_entropy(&g, pass.logits, y)?;
            let lv = scalar(&g, loss);
            let mut grads = g.backward(loss)?;
            let merged = merge_param_grads(&mut grads, &[&pass.params]);
            (lv, lv, None, merged, pass.bn_updates)
        }
        ObjectiveKind::At => {
            let xv = g.leaf(x_adv.expect("adv crafted"), false);
            let pass = ann_forward(&g, net, xv, StatsMode::Batch, true)?;
            let loss = cross_entropy(&g, pass.logits, y)?;
            let lv = scalar(&g, loss);
            let mut grads = g.backward(loss)?;
            let merged = merge_param_grads(&mut grads, &[&pass.params]);
            (lv, lv, None, merged, pass.bn_updates)
        }
        ObjectiveKind::Trades => {
            let xc = g.leaf(x.clone(), false);
            let clean = ann_forward(&g, net, xc, StatsMode::Batch, true)?;
            let xa = g.leaf(x_adv.expect("adv crafted"), false);
            let advp = ann_forward(&g, net, xa, StatsMode::Batch, true)?;
            let ce = cross_entropy(&g, clean.logits, y)?;
            let kl = kl_divergence(&g, advp.logits, clean.logits)?;
            let reg = g.mul_scalar(kl, lambda)?;
            let loss = g.add(ce, reg)?;
            let (lv, mv, rv) = (scalar(&g, loss), scalar(&g, ce), scalar(&g, reg));
            let mut grads = g.backward(loss)?;
            let merged = merge_param_grads(&mut grads, &[&clean.params, &advp.params]);
            (lv, mv, Some(rv), merged, clean.bn_updates)
        }
        ObjectiveKind::Mart => {
            let xc = g.leaf(x.clone(), false);
            let clean = ann_forward(&g, net, xc, StatsMode::Batch, true)?;
            let xa = g.leaf(x_adv.expect("adv crafted"), false);
            let advp = ann_forward(&g, net, xa, StatsMode::Batch, true)?;
            let bce = boosted_cross_entropy(&g, advp.logits, y)?;
            let full = mart_loss(&g, advp.logits, clean.logits, y, lambda)?;
            let (lv, mv) = (scalar(&g, full), scalar(&g, bce));
            let rv = lv - mv;
            let mut grads = g.backward(full)?;
            let merged = merge_param_grads(&mut grads, &[&clean.params, &advp.params]);
            (lv, mv, Some(rv), merged, clean.bn_updates)
        }
        ObjectiveKind::ConvFinetune => unreachable!(),
    };

    Ok((
        grads,
        bn_updates,
        BatchTerms {
            loss,
            main,
            reg,
            attack_calls,
            attack_grad_evals,
        },
    ))
}

/// Adversarially train an analog network in place, returning per-epoch
/// history. Attacks are crafted under current-batch statistics; running
/// estimates update only from the designated outer pass.
pub fn train_ann_robust(
    net: &mut Network,
    setup: &TrainSetup,
    objective: &RobustObjective,
    optim: &OptimConfig,
    seed: u64,
    mut hook: Option<EpochHook>,
) -> Result<TrainReport, TrainError> {
    objective.validate()?;
    if net.mode != NetMode::Ann {
        return Err(TrainError::Objective(
            "analog trainer requires an analog-mode network".into(),
        ));
    }
    if matches!(objective.kind, ObjectiveKind::ConvFinetune) {
        return Err(TrainError::Objective(
            "finetuning objective requires the spiking trainer".into(),
        ));
    }
    let mut opt = Sgd::new(optim.clone())?;
    let space = InputSpace::new(objective.epsilon, setup.norm);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attack_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA77AC4);
    let mut history = Vec::new();
    let mut attack_calls = 0usize;
    let mut attack_grad_evals = 0usize;

    for epoch in 0..optim.epochs {
        let order = shuffled_indices(setup.train.len(), &mut data_rng);
        let mut loss_sum = 0.0;
        let mut main_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut reg_seen = false;
        let mut batches = 0usize;
        for (bi, part) in order.chunks(setup.batch_size).enumerate() {
            if part.len() < 2 {
                continue; // batch statistics need at least two rows
            }
            let (x, y) = make_batch(setup.train, part, setup.norm, setup.augment, &mut data_rng);
            let (grads, bn_updates, terms) =
                ann_batch_grads(net, &x, &y, objective, &space, setup.norm, &mut attack_rng)?;
            if !terms.loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi });
            }
            attack_calls += terms.attack_calls;
            attack_grad_evals += terms.attack_grad_evals;
            opt.step(net, &grads, epoch)?;
            net.apply_bn_updates(&bn_updates);
            loss_sum += terms.loss;
            main_sum += terms.main;
            if let Some(r) = terms.reg {
                reg_sum += r;
                reg_seen = true;
            }
            batches += 1;
        }

        let record = epoch_metrics(
            net,
            None,
            setup,
            objective,
            &space,
            epoch,
            optim.lr_at(epoch),
            loss_sum,
            main_sum,
            reg_seen.then_some(reg_sum),
            batches,
            seed,
            &mut attack_calls,
            &mut attack_grad_evals,
        )?;
        if let Some(h) = hook.as_mut() {
            h(epoch, net, &record);
        }
        history.push(record);
    }
    Ok(TrainReport {
        history,
        attack_calls,
        attack_grad_evals,
    })
}

/// Gradients of the finetuning objective CE(f(x),y) + β·KL(f(x̃)‖f(x)) for
/// one batch. The clean forward is computed once on the training graph and
/// reused as the adversary's KL target; the single-step adversary runs under
/// batch statistics with the training surrogate.
pub fn snn_batch_grads(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    objective: &RobustObjective,
    cfg: &SnnConfig,
    space: &InputSpace,
    norm: &Normalization,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(String, Tensor)>, Vec<(usize, Vec<f32>, Vec<f32>)>, BatchTerms), TrainError> {
    let g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let s0 = encode_direct(&g, xv, cfg.t)?;
    let clean = temporal_forward(&g, net, s0, cfg, &SnnPassOptions::training())?;
    let clean_logits = clean.logits.expect("full pass");
    let clean_value = g.value_clone(clean_logits);

    let beta = objective.beta_or_lambda;
    let mut attack_calls = 0usize;
    let mut attack_grad_evals = 0usize;
    let x_adv = if objective.epsilon > 0.0 {
        let view = ModelView::snn(net, cfg, StatsMode::Batch);
        let alpha = space.scale_step(objective.alpha, norm);
        let out = rfgsm_attack(&view, x, &clean_value, space, &alpha, rng)?;
        attack_calls += 1;
        attack_grad_evals += out.grad_evals;
        out.x_adv
    } else {
        x.clone()
    };

    let xa = g.leaf(x_adv, false);
    let sa = encode_direct(&g, xa, cfg.t)?;
    let advp = temporal_forward(&g, net, sa, cfg, &SnnPassOptions::training())?;
    let adv_logits = advp.logits.expect("full pass");

    let ce = cross_entropy(&g, clean_logits, y)?;
    let kl = kl_divergence(&g, adv_logits, clean_logits)?;
    let reg = g.mul_scalar(kl, beta)?;
    let loss = g.add(ce, reg)?;
    let (lv, mv, rv) = (scalar(&g, loss), scalar(&g, ce), scalar(&g, reg));
    let mut grads = g.backward(loss)?;
    let merged = merge_param_grads(&mut grads, &[&clean.params, &advp.params]);
    Ok((
        merged,
        clean.bn_updates,
        BatchTerms {
            loss: lv,
            main: mv,
            reg: Some(rv),
            attack_calls,
            attack_grad_evals,
        },
    ))
}

/// Robustly finetune a converted spiking network in place with surrogate
/// BPTT: weights, normalization affines, and (unless frozen) firing
/// thresholds all receive gradient.
#[allow(clippy::too_many_arguments)]
pub fn finetune_snn_robust(
    net: &mut Network,
    setup: &TrainSetup,
    objective: &RobustObjective,
    optim: &OptimConfig,
    cfg: &SnnConfig,
    freeze_thresholds: bool,
    seed: u64,
    mut hook: Option<EpochHook>,
) -> Result<TrainReport, TrainError> {
    objective.validate()?;
    if objective.kind != ObjectiveKind::ConvFinetune {
        return Err(TrainError::Objective(
            "spiking trainer requires the finetuning objective".into(),
        ));
    }
    if net.mode != NetMode::Snn {
        return Err(TrainError::Objective(
            "spiking trainer requires a spiking-mode network".into(),
        ));
    }
    let mut opt = Sgd::new(optim.clone())?;
    let space = InputSpace::new(objective.epsilon, setup.norm);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attack_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA77AC4);
    let mut history = Vec::new();
    let mut attack_calls = 0usize;
    let mut attack_grad_evals = 0usize;

    for epoch in 0..optim.epochs {
        let order = shuffled_indices(setup.train.len(), &mut data_rng);
        let mut loss_sum = 0.0;
        let mut main_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut batches = 0usize;
        for (bi, part) in order.chunks(setup.batch_size).enumerate() {
            if part.len() < 2 {
                continue;
            }
            let (x, y) = make_batch(setup.train, part, setup.norm, setup.augment, &mut data_rng);
            let (mut grads, bn_updates, terms) = snn_batch_grads(
                net,
                &x,
                &y,
                objective,
                cfg,
                &space,
                setup.norm,
                &mut attack_rng,
            )?;
            if !terms.loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi });
            }
            if freeze_thresholds {
                grads.retain(|(name, _)| !name.ends_with(".v_th"));
            }
            attack_calls += terms.attack_calls;
            attack_grad_evals += terms.attack_grad_evals;
            opt.step(net, &grads, epoch)?;
            net.apply_bn_updates(&bn_updates);
            loss_sum += terms.loss;
            main_sum += terms.main;
            reg_sum += terms.reg.unwrap_or(0.0);
            batches += 1;
        }

        let record = epoch_metrics(
            net,
            Some(cfg),
            setup,
            objective,
            &space,
            epoch,
            optim.lr_at(epoch),
            loss_sum,
            main_sum,
            Some(reg_sum),
            batches,
            seed,
            &mut attack_calls,
            &mut attack_grad_evals,
        )?;
        if let Some(h) = hook.as_mut() {
            h(epoch, net, &record);
        }
        history.push(record);
    }
    Ok(TrainReport {
        history,
        attack_calls,
        attack_grad_evals,
    })
}

#[allow(clippy::too_many_arguments)]
fn epoch_metrics(
    net: &Network,
    cfg: Option<&SnnConfig>,
    setup: &TrainSetup,
    objective: &RobustObjective,
    space: &InputSpace,
    epoch: usize,
    lr: f32,
    loss_sum: f64,
    main_sum: f64,
    reg_sum: Option<f64>,
    batches: usize,
    seed: u64,
    attack_calls: &mut usize,
    attack_grad_evals: &mut usize,
) -> Result<EpochRecord, TrainError> {
    let view = match cfg {
        None => ModelView::ann(net, StatsMode::Running),
        Some(c) => ModelView::snn(net, c, StatsMode::Running),
    };
    let clean_acc = eval_clean_accuracy(&view, setup.eval, setup.norm, setup.eval_batch)?;
    let robust_acc = if objective.kind != ObjectiveKind::Natural
        && objective.epsilon > 0.0
        && setup.robust_eval_samples > 0
    {
        let subset = setup
            .eval
            .slice(0, setup.robust_eval_samples.min(setup.eval.len()));
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ (0xEA17 + epoch as u64));
        let steps = objective.inner_steps.max(1);
        let (acc, calls, evals) = eval_pgd_accuracy(
            &view,
            &subset,
            setup.norm,
            space,
            steps,
            2.5 * objective.epsilon / steps as f32,
            setup.eval_batch,
            &mut eval_rng,
        )?;
        *attack_calls += calls;
        *attack_grad_evals += evals;
        Some(acc)
    } else {
        None
    };
    let n = batches.max(1) as f64;
    Ok(EpochRecord {
        epoch,
        lr,
        clean_acc,
        robust_acc,
        loss: loss_sum / n,
        loss_main: main_sum / n,
        loss_reg: reg_sum.map(|r| r / n),
    })
}

/// Evaluate the finetuning objective CE(f(x),y) + β·KL(f(x̃)‖f(x)) on fixed
/// data with a seeded adversary — an optimization-sanity probe, not a
/// training step.
pub fn finetune_objective_value(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    objective: &RobustObjective,
    cfg: &SnnConfig,
    space: &InputSpace,
    norm: &Normalization,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, _, terms) = snn_batch_grads(net, x, y, objective, cfg, space, norm, &mut rng)?;
    Ok(terms.loss)
}

/// Re-estimate normalization running statistics from scratch over the given
/// normalized batches: reset, collect per-batch statistics in train mode,
/// and store the pooled estimate (law of total variance across batches).
pub fn reestimate_running_stats(
    net: &mut Network,
    batches: &[Tensor],
    cfg: Option<&SnnConfig>,
) -> Result<(), TrainError> {
    if batches.is_empty() {
        return Ok(());
    }
    for layer in &mut net.layers {
        if let Layer::Norm(p) = layer {
            p.reset_running();
        }
    }
    // layer index → (sum of means, sum of squared means, sum of vars, count)
    let mut acc: BTreeMap<usize, (Vec<f64>, Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for x in batches {
        let updates = match (net.mode, cfg) {
            (NetMode::Ann, _) => {
                let g = Graph::new();
                let xv = g.leaf(x.clone(), false);
                ann_forward(&g, net, xv, StatsMode::Batch, false)?.bn_updates
            }
            (NetMode::Snn, Some(c)) => {
                let g = Graph::new();
                let xv = g.leaf(x.clone(), false);
                let s0 = encode_direct(&g, xv, c.t)?;
                temporal_forward(&g, net, s0, c, &SnnPassOptions::inference(StatsMode::Batch))?
                    .bn_updates
            }
            (NetMode::Snn, None) => {
                return Err(TrainError::Objective(
                    "spiking stats re-estimation needs a spiking config".into(),
                ))
            }
        };
        for (i, mean, var) in updates {
            let entry = acc.entry(i).or_insert_with(|| {
                (
                    vec![0.0; mean.len()],
                    vec![0.0; mean.len()],
                    vec![0.0; var.len()],
                    0,
                )
            });
            for c in 0..mean.len() {
                entry.0[c] += mean[c] as f64;
                entry.1[c] += (mean[c] as f64) * (mean[c] as f64);
                entry.2[c] += var[c] as f64;
            }
            entry.3 += 1;
        }
    }
    for (i, (mean_sum, mean_sq_sum, var_sum, count)) in acc {
        let n = count as f64;
        if let Some(Layer::Norm(p)) = net.layers.get_mut(i) {
            let rm = p.running_mean.data_mut();
            let rv = p.running_var.data_mut();
            for c in 0..rm.len() {
                let m = mean_sum[c] / n;
                let within = var_sum[c] / n;
                let between = (mean_sq_sum[c] / n - m * m).max(0.0);
                rm[c] = m as f32;
                rv[c] = (within + between) as f32;
            }
        }
    }
    Ok(())
}
