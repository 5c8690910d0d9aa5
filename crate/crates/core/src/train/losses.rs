//! Classification and distribution-matching losses built on the graph ops.
//!
//! Every loss takes raw logits (readout potentials) and goes through
//! log-sum-exp internally, so no probability is ever materialized before a
//! log — the true-class-probability-zero case stays finite.

use crate::autograd::{Graph, GraphError, Var};
use crate::tensor::Tensor;

/// (B, classes) one-hot matrix for index labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("one-hot shape")
}

fn class_count(g: &Graph, logits: Var) -> usize {
    *g.shape(logits).last().expect("logits rank >= 2")
}

/// Batch-averaged cross-entropy: −log softmax(logits) at the true class.
pub fn cross_entropy(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var, GraphError> {
    let classes = class_count(g, logits);
    let b = labels.len();
    let ls = g.log_softmax_last(logits)?;
    let mask = g.leaf(one_hot(labels, classes), false);
    let picked = g.mul(ls, mask)?;
    g.mul_scalar(g.sum(picked)?, -1.0 / b as f32)
}

/// Per-sample KL divergence KL(softmax(adv) ‖ softmax(clean)), shape (B,).
pub fn kl_per_sample(g: &Graph, adv: Var, clean: Var) -> Result<Var, GraphError> {
    let la = g.log_softmax_last(adv)?;
    let lc = g.log_softmax_last(clean)?;
    let pa = g.exp(la)?;
    let diff = g.sub(la, lc)?;
    g.sum_last(g.mul(pa, diff)?)
}

/// Batch-averaged KL divergence between adversarial and clean predictions.
pub fn kl_divergence(g: &Graph, adv: Var, clean: Var) -> Result<Var, GraphError> {
    let rows = g.shape(adv)[0];
    let per = kl_per_sample(g, adv, clean)?;
    g.mul_scalar(g.sum(per)?, 1.0 / rows as f32)
}

/// True-class probability per sample, shape (B,).
pub fn true_class_prob(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var, GraphError> {
    let classes = class_count(g, logits);
    let p = g.softmax_last(logits)?;
    let mask = g.leaf(one_hot(labels, classes), false);
    g.sum_last(g.mul(p, mask)?)
}

/// Boosted cross-entropy: CE(logits, y) − log(1 − max_{j≠y} p_j),
/// batch-averaged. The margin term pushes the runner-up class down; the
/// guard constant keeps the log finite if the runner-up saturates at 1.
pub fn boosted_cross_entropy(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var, GraphError> {
    let classes = class_count(g, logits);
    let b = labels.len();
    let ce = cross_entropy(g, logits, labels)?;
    let p = g.softmax_last(logits)?;
    let hot = one_hot(labels, classes);
    let off_mask = Tensor::new(
        hot.shape().to_vec(),
        hot.data().iter().map(|&v| 1.0 - v).collect(),
    )
    .expect("mask shape");
    let p_off = g.mul(p, g.leaf(off_mask, false))?;
    let runner_up = g.max_last(p_off)?;
    let one_minus = g.add_scalar(g.add_scalar(g.neg(runner_up)?, 1.0)?, 1e-12)?;
    let margin = g.mul_scalar(g.sum(g.log(one_minus)?)?, -1.0 / b as f32)?;
    g.add(ce, margin)
}

/// Misclassification-aware robust loss:
/// BCE(adv, y) + λ · mean_i[(1 − p_y(clean)_i) · KL_i(adv ‖ clean)].
pub fn mart_loss(
    g: &Graph,
    adv_logits: Var,
    clean_logits: Var,
    labels: &[usize],
    lambda: f32,
) -> Result<Var, GraphError> {
    let b = labels.len();
    let bce = boosted_cross_entropy(g, adv_logits, labels)?;
    let kl_i = kl_per_sample(g, adv_logits, clean_logits)?;
    let py = true_class_prob(g, clean_logits, labels)?;
    let weight = g.add_scalar(g.neg(py)?, 1.0)?;
    let weighted = g.mul(weight, kl_i)?;
    let reg = g.mul_scalar(g.sum(weighted)?, lambda / b as f32)?;
    g.add(bce, reg)
}

/// Consistency robust loss: CE(clean, y) + λ · KL(adv ‖ clean).
pub fn trades_loss(
    g: &Graph,
    adv_logits: Var,
    clean_logits: Var,
    labels: &[usize],
    lambda: f32,
) -> Result<Var, GraphError> {
    let ce = cross_entropy(g, clean_logits, labels)?;
    let kl = kl_divergence(g, adv_logits, clean_logits)?;
    g.add(ce, g.mul_scalar(kl, lambda)?)
}
