//! Adaptive ensemble adversary: every sample is attacked once per surrogate
//! gradient path, and counts as robust only when the true model classifies
//! it correctly on the clean input and under every member's perturbation.
//! The same machinery runs black-box transfer (craft on a source model,
//! judge on the target) and a gradient-obfuscation sanity suite.

use crate::data::{make_batch, Dataset, Normalization};
use crate::snn::argmax_rows;
use crate::surrogate::SurrogateSpec;
use crate::tensor::Tensor;
use crate::train::adv::{pgd_attack, rfgsm_attack, AdvError, InnerLoss, InputSpace, ModelView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack spec: {0}")]
    Config(String),
    #[error("source input shape {source_shape:?} does not match target {target_shape:?}")]
    ShapeMismatch {
        source_shape: [usize; 3],
        target_shape: [usize; 3],
    },
    #[error(transparent)]
    Adv(#[from] AdvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackAlgo {
    Fgsm,
    Rfgsm,
    Pgd,
}

impl std::fmt::Display for AttackAlgo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackAlgo::Fgsm => write!(f, "fgsm"),
            AttackAlgo::Rfgsm => write!(f, "rfgsm"),
            AttackAlgo::Pgd => write!(f, "pgd"),
        }
    }
}

/// A complete attack configuration. The surrogate list defines the ensemble
/// members; single-member lists reduce to an ordinary attack.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackSpec {
    pub algo: AttackAlgo,
    /// l∞ budget on the raw [0,1] pixel scale.
    pub epsilon: f32,
    pub steps: usize,
    /// Step size on the raw scale; 0 selects 2.5·ε/steps.
    pub eta: f32,
    pub inner_loss: InnerLoss,
    pub random_start: bool,
    pub surrogates: Vec<SurrogateSpec>,
}

impl AttackSpec {
    pub fn pgd(epsilon: f32, steps: usize, surrogates: Vec<SurrogateSpec>) -> Self {
        AttackSpec {
            algo: AttackAlgo::Pgd,
            epsilon,
            steps,
            eta: 0.0,
            inner_loss: InnerLoss::Ce,
            random_start: true,
            surrogates,
        }
    }

    pub fn fgsm(epsilon: f32, surrogates: Vec<SurrogateSpec>) -> Self {
        AttackSpec {
            algo: AttackAlgo::Fgsm,
            epsilon,
            steps: 1,
            eta: 0.0,
            inner_loss: InnerLoss::Ce,
            random_start: false,
            surrogates,
        }
    }

    pub fn rfgsm(epsilon: f32, surrogates: Vec<SurrogateSpec>) -> Self {
        AttackSpec {
            algo: AttackAlgo::Rfgsm,
            epsilon,
            steps: 1,
            eta: 0.0,
            inner_loss: InnerLoss::Kl,
            random_start: true,
            surrogates,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.epsilon < 0.0 {
            return Err(AttackError::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.surrogates.is_empty() {
            return Err(AttackError::Config("surrogate list must be nonempty".into()));
        }
        match self.algo {
            AttackAlgo::Fgsm | AttackAlgo::Rfgsm => {
                if self.steps != 1 {
                    return Err(AttackError::Config(format!(
                        "{} is single-step, got steps={}",
                        self.algo, self.steps
                    )));
                }
            }
            AttackAlgo::Pgd => {
                if self.steps == 0 {
                    return Err(AttackError::Config("pgd needs steps >= 1".into()));
                }
            }
        }
        Ok(())
    }

    fn eta_effective(&self) -> f32 {
        if self.eta > 0.0 {
            self.eta
        } else {
            2.5 * self.epsilon / self.steps as f32
        }
    }
}

/// One ensemble member's outcome: per-sample correctness of the true model
/// under this member's perturbation. `None` marks samples skipped by early
/// exit (already fooled, or clean-incorrect).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MemberReport {
    pub surrogate: String,
    pub per_sample: Vec<Option<bool>>,
    /// Robust accuracy against this member alone (clean-correct AND
    /// member-correct); only available when nothing was skipped.
    pub robust_accuracy: Option<f64>,
    /// Observed fooled count (lower bound under early exit).
    pub fooled: usize,
}

/// Full ensemble outcome over an evaluation slice.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackReport {
    pub algo: String,
    pub epsilon: f32,
    pub samples: usize,
    pub transfer: bool,
    pub clean_correct: Vec<bool>,
    pub members: Vec<MemberReport>,
    /// Aggregate per-sample robustness: clean-correct AND correct under
    /// every member (AND over the bitmap rows).
    pub robust: Vec<bool>,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    /// Member with the most observed fools (ties break toward the earlier
    /// member in grid order).
    pub strongest_member: String,
}

impl AttackReport {
    /// Recompute the aggregate from the stored bitmaps (round-trip check).
    pub fn recompute_robust(&self) -> Vec<bool> {
        (0..self.samples)
            .map(|i| {
                self.clean_correct[i]
                    && self
                        .members
                        .iter()
                        .all(|m| m.per_sample[i].unwrap_or(false))
            })
            .collect()
    }

    /// Per-member robust accuracies keyed by surrogate token.
    pub fn member_accuracy_map(&self) -> BTreeMap<String, Option<f64>> {
        self.members
            .iter()
            .map(|m| (m.surrogate.clone(), m.robust_accuracy))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report serializes");
        value["member_accuracy"] =
            serde_json::to_value(self.member_accuracy_map()).expect("map serializes");
        serde_json::to_string_pretty(&value).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "model,attack,epsilon,samples,clean_acc,robust_acc,strongest_member,transfer"
    }

    pub fn csv_row(&self, model: &str) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{},{}",
            model,
            self.algo,
            self.epsilon,
            self.samples,
            self.clean_accuracy,
            self.robust_accuracy,
            self.strongest_member,
            self.transfer
        )
    }
}

/// Execution knobs for the ensemble: chunking bounds peak memory, the seed
/// fixes every random draw, and `full_grid` disables per-member early exit
/// so the complete member table is populated.
#[derive(Debug, Clone)]
pub struct EnsembleOptions {
    pub seed: u64,
    pub chunk: usize,
    pub full_grid: bool,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            seed: 0,
            chunk: 100,
            full_grid: false,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent stream per (base seed, chunk, member): the member index is
/// folded into the seed so each member re-randomizes its start.
fn member_seed(base: u64, chunk: usize, member: usize) -> u64 {
    splitmix(base ^ splitmix(chunk as u64 + 1) ^ ((member as u64 + 1) << 32))
}

fn gather_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let mut shape = x.shape().to_vec();
    let stride: usize = shape[1..].iter().product();
    shape[0] = rows.len();
    let mut data = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        data.extend_from_slice(&x.data()[r * stride..(r + 1) * stride]);
    }
    Tensor::new(shape, data).expect("gather shape")
}

fn craft_member(
    view: &ModelView,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    space: &InputSpace,
    norm: &Normalization,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, AttackError> {
    let out = match spec.algo {
        AttackAlgo::Pgd => {
            let eta = space.scale_step(spec.eta_effective(), norm);
            pgd_attack(
                view,
                x,
                y,
                space,
                spec.steps,
                &eta,
                spec.inner_loss,
                spec.random_start,
                rng,
            )?
        }
        AttackAlgo::Fgsm => pgd_attack(
            view,
            x,
            y,
            space,
            1,
            &space.eps,
            spec.inner_loss,
            false,
            rng,
        )?,
        AttackAlgo::Rfgsm => {
            let clean = view.logits(x)?;
            let alpha: Vec<f32> = space.eps.iter().map(|e| e / 2.0).collect();
            rfgsm_attack(view, x, &clean, space, &alpha, rng)?
        }
    };
    debug_assert!(in_threat_set(&out.x_adv, x, space));
    Ok(out.x_adv)
}

fn in_threat_set(x_adv: &Tensor, x: &Tensor, space: &InputSpace) -> bool {
    let c = space.channels();
    x_adv.data().iter().enumerate().all(|(i, &v)| {
        let ch = i % c;
        let r = x.data()[i];
        v <= r + space.eps[ch]
            && v >= r - space.eps[ch]
            && v >= space.lo[ch]
            && v <= space.hi[ch]
    })
}

struct ChunkResult {
    clean_correct: Vec<bool>,
    member_rows: Vec<Vec<Option<bool>>>,
}

#[allow(clippy::too_many_arguments)]
fn attack_chunk(
    source: &ModelView,
    target: &ModelView,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    space: &InputSpace,
    norm: &Normalization,
    chunk_idx: usize,
    opts: &EnsembleOptions,
) -> Result<ChunkResult, AttackError> {
    let n = y.len();
    let clean_logits = target.logits(x)?;
    let clean_correct: Vec<bool> = argmax_rows(&clean_logits)
        .iter()
        .zip(y)
        .map(|(p, t)| p == t)
        .collect();

    let mut member_rows: Vec<Vec<Option<bool>>> =
        vec![vec![None; n]; spec.surrogates.len()];
    let mut alive: Vec<usize> = if opts.full_grid {
        (0..n).collect()
    } else {
        (0..n).filter(|&i| clean_correct[i]).collect()
    };

    for (mi, member) in spec.surrogates.iter().enumerate() {
        if alive.is_empty() {
            break;
        }
        let craft_view = source.with_surrogate(*member);
        let xs = gather_rows(x, &alive);
        let ys: Vec<usize> = alive.iter().map(|&i| y[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(member_seed(opts.seed, chunk_idx, mi));
        let x_adv = craft_member(&craft_view, &xs, &ys, spec, space, norm, &mut rng)?;
        let adv_logits = target.logits(&x_adv)?;
        let pred = argmax_rows(&adv_logits);
        let mut next_alive = Vec::with_capacity(alive.len());
        for (k, &i) in alive.iter().enumerate() {
            let correct = pred[k] == y[i];
            member_rows[mi][i] = Some(correct);
            if opts.full_grid || correct {
                next_alive.push(i);
            }
        }
        if !opts.full_grid {
            alive = next_alive;
        }
    }

    Ok(ChunkResult {
        clean_correct,
        member_rows,
    })
}

/// Craft on `source`, judge on `target`. With `source` == `target` this is
/// the white-box ensemble; otherwise it is a black-box transfer evaluation.
pub fn transfer_attack(
    source: &ModelView,
    target: &ModelView,
    ds: &Dataset,
    norm: &Normalization,
    spec: &AttackSpec,
    opts: &EnsembleOptions,
) -> Result<AttackReport, AttackError> {
    spec.validate()?;
    if source.net.in_shape != target.net.in_shape {
        return Err(AttackError::ShapeMismatch {
            source_shape: source.net.in_shape,
            target_shape: target.net.in_shape,
        });
    }
    let transfer = !std::ptr::eq(source.net, target.net);
    let space = InputSpace::new(spec.epsilon, norm);
    let n = ds.len();
    let chunk = opts.chunk.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();

    // Chunks are independent given their folded seeds; process in parallel
    // and merge in index order for a deterministic report.
    let results: Result<Vec<ChunkResult>, AttackError> = starts
        .par_iter()
        .enumerate()
        .map(|(ci, &start)| {
            let len = chunk.min(n - start);
            let idx: Vec<usize> = (start..start + len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0); // no augmentation draws
            let (x, y) = make_batch(ds, &idx, norm, None, &mut rng);
            attack_chunk(source, target, &x, &y, spec, &space, norm, ci, opts)
        })
        .collect();
    let results = results?;

    let mut clean_correct = Vec::with_capacity(n);
    let mut member_rows: Vec<Vec<Option<bool>>> =
        vec![Vec::with_capacity(n); spec.surrogates.len()];
    for r in results {
        clean_correct.extend(r.clean_correct);
        for (mi, rows) in r.member_rows.into_iter().enumerate() {
            member_rows[mi].extend(rows);
        }
    }

    let robust: Vec<bool> = (0..n)
        .map(|i| clean_correct[i] && member_rows.iter().all(|m| m[i].unwrap_or(false)))
        .collect();
    let members: Vec<MemberReport> = spec
        .surrogates
        .iter()
        .zip(member_rows)
        .map(|(s, rows)| {
            let complete = rows.iter().all(|e| e.is_some());
            let robust_accuracy = complete.then(|| {
                rows.iter()
                    .zip(&clean_correct)
                    .filter(|(e, &c)| c && e.unwrap_or(false))
                    .count() as f64
                    / n.max(1) as f64
            });
            let fooled = rows.iter().filter(|e| **e == Some(false)).count();
            MemberReport {
                surrogate: s.to_string(),
                per_sample: rows,
                robust_accuracy,
                fooled,
            }
        })
        .collect();

    let strongest_member = members
        .iter()
        .max_by_key(|m| m.fooled)
        .map(|m| m.surrogate.clone())
        .unwrap_or_default();
    let clean_accuracy =
        clean_correct.iter().filter(|&&c| c).count() as f64 / n.max(1) as f64;
    let robust_accuracy = robust.iter().filter(|&&r| r).count() as f64 / n.max(1) as f64;

    Ok(AttackReport {
        algo: spec.algo.to_string(),
        epsilon: spec.epsilon,
        samples: n,
        transfer,
        clean_correct,
        members,
        robust,
        clean_accuracy,
        robust_accuracy,
        strongest_member,
    })
}

/// White-box adaptive ensemble: craft and judge on the same frozen model.
pub fn run_ensemble(
    model: &ModelView,
    ds: &Dataset,
    norm: &Normalization,
    spec: &AttackSpec,
    opts: &EnsembleOptions,
) -> Result<AttackReport, AttackError> {
    transfer_attack(model, model, ds, norm, spec, opts)
}

/// Gradient-obfuscation diagnostics. Nothing here fails hard: violated
/// principles come back as warnings.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SanityReport {
    pub clean_accuracy: f64,
    pub eps_grid: Vec<f32>,
    pub fgsm_accuracy: Vec<f64>,
    pub pgd_accuracy: Vec<f64>,
    pub transfer_accuracy: Option<Vec<f64>>,
    pub gaussian_accuracy: Vec<f64>,
    pub large_eps: f32,
    pub large_eps_accuracy: f64,
    pub warnings: Vec<String>,
}

fn eval_correct(view: &ModelView, x: &Tensor, y: &[usize]) -> Result<usize, AttackError> {
    let logits = view.logits(x)?;
    Ok(argmax_rows(&logits)
        .iter()
        .zip(y)
        .filter(|(p, t)| p == t)
        .count())
}

/// Accuracy under additive Gaussian pixel noise at σ=`sigma_raw`, clamped to
/// the valid range.
pub fn gaussian_noise_accuracy(
    view: &ModelView,
    ds: &Dataset,
    norm: &Normalization,
    sigma_raw: f32,
    chunk: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, AttackError> {
    let space = InputSpace::new(sigma_raw, norm);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = make_batch(ds, part, norm, None, rng);
        let noise = Tensor::rand_normal(x.shape(), rng);
        let c = space.channels();
        let mut noisy = x.clone();
        for (i, v) in noisy.data_mut().iter_mut().enumerate() {
            // sigma in normalized units is the per-channel eps mapping.
            *v += space.eps[i % c] * noise.data()[i];
        }
        space.clamp_valid(&mut noisy);
        correct += eval_correct(view, &noisy, &y)?;
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

/// Run the five gradient-masking checks on a frozen model over an ε grid.
/// `bb_source` (when given) supplies the transfer baseline for the
/// white-box ≤ black-box principle. `pgd_steps` applies at every ε.
#[allow(clippy::too_many_arguments)]
pub fn sanity_suite(
    model: &ModelView,
    bb_source: Option<&ModelView>,
    ds: &Dataset,
    norm: &Normalization,
    eps_grid: &[f32],
    large_eps: f32,
    pgd_steps: usize,
    surrogate: SurrogateSpec,
    opts: &EnsembleOptions,
) -> Result<SanityReport, AttackError> {
    let mut warnings = Vec::new();
    let mut fgsm_accuracy = Vec::new();
    let mut pgd_accuracy = Vec::new();
    let mut transfer_accuracy = bb_source.map(|_| Vec::new());
    let mut gaussian_accuracy = Vec::new();

    let clean = run_ensemble(
        model,
        ds,
        norm,
        &AttackSpec::pgd(0.0, 1, vec![surrogate]),
        opts,
    )?;
    let clean_accuracy = clean.clean_accuracy;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6A055);
    for (ei, &eps) in eps_grid.iter().enumerate() {
        let fgsm = run_ensemble(
            model,
            ds,
            norm,
            &AttackSpec::fgsm(eps, vec![surrogate]),
            opts,
        )?;
        let pgd = run_ensemble(
            model,
            ds,
            norm,
            &AttackSpec::pgd(eps, pgd_steps, vec![surrogate]),
            opts,
        )?;
        fgsm_accuracy.push(fgsm.robust_accuracy);
        pgd_accuracy.push(pgd.robust_accuracy);
        if eps > 0.0 && pgd.robust_accuracy > fgsm.robust_accuracy {
            warnings.push(format!(
                "principle 1 violated at eps={eps}: PGD robust accuracy {:.4} exceeds FGSM {:.4}",
                pgd.robust_accuracy, fgsm.robust_accuracy
            ));
        }
        if let (Some(src), Some(acc)) = (bb_source, transfer_accuracy.as_mut()) {
            let bb = transfer_attack(
                src,
                model,
                ds,
                norm,
                &AttackSpec::pgd(eps, pgd_steps, vec![surrogate]),
                opts,
            )?;
            acc.push(bb.robust_accuracy);
            if eps > 0.0 && pgd.robust_accuracy > bb.robust_accuracy {
                warnings.push(format!(
                    "principle 2 violated at eps={eps}: white-box robust accuracy {:.4} exceeds black-box {:.4}",
                    pgd.robust_accuracy, bb.robust_accuracy
                ));
            }
        }
        if ei > 0 && pgd.robust_accuracy > pgd_accuracy[ei - 1] {
            warnings.push(format!(
                "principle 3 violated: robust accuracy rose from {:.4} at eps={} to {:.4} at eps={}",
                pgd_accuracy[ei - 1],
                eps_grid[ei - 1],
                pgd.robust_accuracy,
                eps
            ));
        }
        let gauss = gaussian_noise_accuracy(model, ds, norm, eps, opts.chunk, &mut noise_rng)?;
        gaussian_accuracy.push(gauss);
        if clean_accuracy - gauss > 0.05 {
            warnings.push(format!(
                "principle 5 violated at sigma={eps}: Gaussian noise dropped accuracy from {clean_accuracy:.4} to {gauss:.4}"
            ));
        }
    }

    let big = run_ensemble(
        model,
        ds,
        norm,
        &AttackSpec::pgd(large_eps, pgd_steps, vec![surrogate]),
        opts,
    )?;
    if big.robust_accuracy >= 0.01 {
        warnings.push(format!(
            "principle 4 violated: robust accuracy {:.4} at eps={large_eps} should be < 0.01",
            big.robust_accuracy
        ));
    }

    Ok(SanityReport {
        clean_accuracy,
        eps_grid: eps_grid.to_vec(),
        fgsm_accuracy,
        pgd_accuracy,
        transfer_accuracy,
        gaussian_accuracy,
        large_eps,
        large_eps_accuracy: big.robust_accuracy,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_arch, StatsMode};
    use crate::surrogate::ensemble_grid;
    use crate::train::{reestimate_running_stats, train_ann_robust, OptimConfig, RobustObjective, Schedule, TrainSetup};
    use rand::Rng;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n * 9);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            labels.push(class);
            for _ in 0..9 {
                let base: u8 = if class == 0 { 50 } else { 190 };
                images.push(base.saturating_add(rng.gen_range(0..25) as u8));
            }
        }
        Dataset {
            images,
            shape: [3, 3, 1],
            labels,
            num_classes: 2,
        }
    }

    /// A briefly trained analog model with sane running statistics.
    fn trained_ann(seed: u64) -> crate::nn::Network {
        let train = toy_data(64, seed);
        let eval = toy_data(16, seed + 1);
        let norm = Normalization::identity(1);
        let setup = TrainSetup {
            train: &train,
            eval: &eval,
            norm: &norm,
            batch_size: 16,
            augment: None,
            eval_batch: 32,
            robust_eval_samples: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let mut net = build_arch("mlp-small", [3, 3, 1], 2, &mut rng).unwrap();
        let optim = OptimConfig::new(0.05, 0.9, 0.0, 3, Schedule::Constant).unwrap();
        train_ann_robust(
            &mut net,
            &setup,
            &RobustObjective::natural(),
            &optim,
            seed + 3,
            None,
        )
        .unwrap();
        net
    }

    #[test]
    fn spec_validation() {
        let grid = ensemble_grid();
        assert_eq!(grid.len(), 19);
        assert!(AttackSpec::pgd(0.1, 10, grid.clone()).validate().is_ok());
        assert!(AttackSpec::pgd(0.1, 0, grid.clone()).validate().is_err());
        assert!(AttackSpec::pgd(-0.1, 10, grid.clone()).validate().is_err());
        assert!(AttackSpec::pgd(0.1, 10, vec![]).validate().is_err());
        let mut f = AttackSpec::fgsm(0.1, grid);
        f.steps = 2;
        assert!(f.validate().is_err());
    }

    #[test]
    fn single_member_aggregate_equals_member() {
        let net = trained_ann(1);
        let ds = toy_data(24, 5);
        let norm = Normalization::identity(1);
        let view = ModelView::ann(&net, StatsMode::Running);
        let spec = AttackSpec::pgd(0.08, 4, vec![SurrogateSpec::training_default()]);
        let opts = EnsembleOptions {
            full_grid: true,
            ..Default::default()
        };
        let report = run_ensemble(&view, &ds, &norm, &spec, &opts).unwrap();
        assert_eq!(report.members.len(), 1);
        assert_eq!(
            report.members[0].robust_accuracy.unwrap(),
            report.robust_accuracy
        );
        assert!(!report.transfer);
        // Aggregate recomputes from bitmaps.
        assert_eq!(report.recompute_robust(), report.robust);
    }

    #[test]
    fn ensemble_bounded_by_members_and_monotone() {
        let net = trained_ann(2);
        let ds = toy_data(200, 6);
        let norm = Normalization::identity(1);
        let view = ModelView::ann(&net, StatsMode::Running);
        let grid = ensemble_grid();
        let small = AttackSpec::fgsm(0.06, grid[..5].to_vec());
        let full = AttackSpec::fgsm(0.06, grid);
        let opts = EnsembleOptions {
            full_grid: true,
            ..Default::default()
        };
        let rs = run_ensemble(&view, &ds, &norm, &small, &opts).unwrap();
        let rf = run_ensemble(&view, &ds, &norm, &full, &opts).unwrap();
        for m in &rs.members {
            assert!(rs.robust_accuracy <= m.robust_accuracy.unwrap() + 1e-12);
        }
        // Nested ensembles: more members can only lower the aggregate.
        assert!(rf.robust_accuracy <= rs.robust_accuracy + 1e-12);
        assert_eq!(rf.members.len(), 19);
    }

    #[test]
    fn early_exit_matches_full_grid_aggregate() {
        let net = trained_ann(3);
        let ds = toy_data(20, 7);
        let norm = Normalization::identity(1);
        let view = ModelView::ann(&net, StatsMode::Running);
        let spec = AttackSpec::fgsm(0.07, ensemble_grid()[..6].to_vec());
        let fast = run_ensemble(
            &view,
            &ds,
            &norm,
            &spec,
            &EnsembleOptions {
                full_grid: false,
                ..Default::default()
            },
        )
        .unwrap();
        let full = run_ensemble(
            &view,
            &ds,
            &norm,
            &spec,
            &EnsembleOptions {
                full_grid: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fast.robust, full.robust);
        assert_eq!(fast.robust_accuracy, full.robust_accuracy);
        // Early exit leaves skipped holes; full grid leaves none.
        assert!(full.members.iter().all(|m| m.robust_accuracy.is_some()));
    }

    #[test]
    fn deterministic_given_seed_and_chunking() {
        let net = trained_ann(4);
        let ds = toy_data(26, 8);
        let norm = Normalization::identity(1);
        let view = ModelView::ann(&net, StatsMode::Running);
        let spec = AttackSpec::pgd(0.05, 3, ensemble_grid()[..4].to_vec());
        let a = run_ensemble(
            &view,
            &ds,
            &norm,
            &spec,
            &EnsembleOptions {
                seed: 9,
                chunk: 7,
                full_grid: false,
            },
        )
        .unwrap();
        let b = run_ensemble(
            &view,
            &ds,
            &norm,
            &spec,
            &EnsembleOptions {
                seed: 9,
                chunk: 7,
                full_grid: false,
            },
        )
        .unwrap();
        assert_eq!(a.robust, b.robust);
        assert_eq!(
            a.members.iter().map(|m| &m.per_sample).collect::<Vec<_>>(),
            b.members.iter().map(|m| &m.per_sample).collect::<Vec<_>>()
        );
    }

    #[test]
    fn transfer_source_equals_target_is_white_box() {
        let net = trained_ann(5);
        let ds = toy_data(16, 9);
        let norm = Normalization::identity(1);
        let view = ModelView::ann(&net, StatsMode::Running);
        let spec = AttackSpec::pgd(0.06, 3, vec![SurrogateSpec::training_default()]);
        let opts = EnsembleOptions::default();
        let wb = run_ensemble(&view, &ds, &norm, &spec, &opts).unwrap();
        let tr = transfer_attack(&view, &view, &ds, &norm, &spec, &opts).unwrap();
        assert_eq!(wb.robust, tr.robust);
        assert!(!tr.transfer);
    }

    #[test]
    fn transfer_zero_eps_is_target_clean_accuracy() {
        let source = trained_ann(6);
        let target = trained_ann(7);
        let ds = toy_data(18, 10);
        let norm = Normalization::identity(1);
        let sv = ModelView::ann(&source, StatsMode::Running);
        let tv = ModelView::ann(&target, StatsMode::Running);
        let spec = AttackSpec::pgd(0.0, 1, vec![SurrogateSpec::training_default()]);
        let r = transfer_attack(&sv, &tv, &ds, &norm, &spec, &EnsembleOptions::default()).unwrap();
        assert!(r.transfer);
        assert_eq!(r.robust_accuracy, r.clean_accuracy);
    }

    #[test]
    fn transfer_rejects_shape_mismatch() {
        let a = trained_ann(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_arch("mlp-small", [4, 4, 1], 2, &mut rng).unwrap();
        let ds = toy_data(4, 11);
        let norm = Normalization::identity(1);
        let av = ModelView::ann(&a, StatsMode::Running);
        let bv = ModelView::ann(&b, StatsMode::Running);
        let spec = AttackSpec::fgsm(0.1, vec![SurrogateSpec::training_default()]);
        assert!(matches!(
            transfer_attack(&av, &bv, &ds, &norm, &spec, &EnsembleOptions::default()),
            Err(AttackError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sanity_suite_zero_grid_and_undefended_collapse() {
        let net = trained_ann(9);
        let ds = toy_data(24, 12);
        let norm = Normalization::identity(1);
        let view = ModelView::ann(&net, StatsMode::Running);
        let opts = EnsembleOptions::default();
        let rep = sanity_suite(
            &view,
            None,
            &ds,
            &norm,
            &[0.0],
            0.9,
            5,
            SurrogateSpec::training_default(),
            &opts,
        )
        .unwrap();
        // eps=0 rows equal clean accuracy.
        assert_eq!(rep.fgsm_accuracy[0], rep.clean_accuracy);
        assert_eq!(rep.pgd_accuracy[0], rep.clean_accuracy);
        // A near-saturating attack collapses this toy model.
        assert!(rep.large_eps_accuracy < 0.01 + 1e-12);
    }

    #[test]
    fn report_serialization_round_trip() {
        let net = trained_ann(10);
        let ds = toy_data(10, 13);
        let norm = Normalization::identity(1);
        let view = ModelView::ann(&net, StatsMode::Running);
        let spec = AttackSpec::fgsm(0.05, ensemble_grid()[..3].to_vec());
        let opts = EnsembleOptions {
            full_grid: true,
            ..Default::default()
        };
        let rep = run_ensemble(&view, &ds, &norm, &spec, &opts).unwrap();
        let json = rep.to_json();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["samples"], 10);
        assert!(value["member_accuracy"]["pl:1"].is_number() || value["member_accuracy"]["pl:0.25"].is_number());
        let row = rep.csv_row("toy");
        assert!(row.starts_with("toy,fgsm,0.05,10,"));
        assert_eq!(AttackReport::csv_header().split(',').count(), row.split(',').count());
    }

    #[test]
    fn snn_ensemble_runs_all_member_kinds() {
        // Smoke test: a converted spiking model survives the full 19-member
        // grid including the structural members.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let ann = trained_ann(11);
        let train = toy_data(32, 41);
        let norm = Normalization::identity(1);
        let batches: Vec<Tensor> = (0..2)
            .map(|b| {
                let idx: Vec<usize> = (b * 16..(b + 1) * 16).collect();
                make_batch(&train, &idx, &norm, None, &mut rng).0
            })
            .collect();
        let cal = crate::convert::CalibrationConfig {
            t_c: 6,
            num_batches: 2,
            batch_size: 16,
            rho: 99.7,
            kappa: 0.3,
        };
        let cfg = crate::snn::SnnConfig::default_if(6);
        let (mut snn, _) = crate::convert::convert(&ann, &batches, &cal, &cfg).unwrap();
        reestimate_running_stats(&mut snn, &batches, Some(&cfg)).unwrap();
        let view = ModelView::snn(&snn, &cfg, StatsMode::Running);
        let ds = toy_data(8, 42);
        let spec = AttackSpec::fgsm(0.05, ensemble_grid());
        let opts = EnsembleOptions {
            full_grid: true,
            chunk: 8,
            ..Default::default()
        };
        let rep = run_ensemble(&view, &ds, &norm, &spec, &opts).unwrap();
        assert_eq!(rep.members.len(), 19);
        for m in &rep.members {
            assert!(m.robust_accuracy.is_some(), "{}", m.surrogate);
        }
        assert_eq!(rep.recompute_robust(), rep.robust);
    }
}
