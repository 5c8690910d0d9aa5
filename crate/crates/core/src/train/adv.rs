//! Input-space adversaries: the l∞ geometry, a unified differentiable view
//! of analog and spiking models, and the FGSM / PGD / randomized-FGSM
//! perturbation crafters shared by training and evaluation.

use crate::autograd::{Graph, GraphError, Var};
use crate::data::Normalization;
use crate::nn::{ann_forward, NetMode, Network, NnError, StatsMode};
use crate::snn::{
    encode_direct, needs_structural_path, rate_graph_forward, record_run, relu_substitute_forward,
    snn_logits, temporal_forward, SnnConfig, SnnError, SnnPassOptions,
};
use crate::surrogate::SurrogateSpec;
use crate::tensor::Tensor;
use crate::train::losses;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdvError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error("invalid attack setup: {0}")]
    Config(String),
}

/// The l∞ threat geometry in normalized input space. A raw-pixel budget ε
/// (on the [0,1] scale) maps to per-channel budgets ε_c = ε/std_c, and the
/// valid range [0,1] maps to per-channel bounds after normalization.
#[derive(Debug, Clone)]
pub struct InputSpace {
    pub eps: Vec<f32>,
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl InputSpace {
    pub fn new(eps_raw: f32, norm: &Normalization) -> Self {
        let eps = norm.std.iter().map(|&s| eps_raw / s).collect();
        let lo = norm
            .mean
            .iter()
            .zip(&norm.std)
            .map(|(&m, &s)| (0.0 - m) / s)
            .collect();
        let hi = norm
            .mean
            .iter()
            .zip(&norm.std)
            .map(|(&m, &s)| (1.0 - m) / s)
            .collect();
        InputSpace { eps, lo, hi }
    }

    pub fn channels(&self) -> usize {
        self.eps.len()
    }

    /// Per-channel step sizes for a raw-pixel step η.
    pub fn scale_step(&self, eta_raw: f32, norm: &Normalization) -> Vec<f32> {
        norm.std.iter().map(|&s| eta_raw / s).collect()
    }

    /// Exact projection onto (ε-ball around `x_ref`) ∩ (valid range),
    /// elementwise per channel. Requires x_ref itself in the valid range,
    /// which normalized images always satisfy.
    pub fn project(&self, x_adv: &mut Tensor, x_ref: &Tensor) {
        let c = self.channels();
        let xr = x_ref.data();
        for (i, v) in x_adv.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            let lo_ball = xr[i] - self.eps[ch];
            let hi_ball = xr[i] + self.eps[ch];
            *v = v.clamp(lo_ball, hi_ball).clamp(self.lo[ch], self.hi[ch]);
        }
    }

    /// Clamp to the valid input range only.
    pub fn clamp_valid(&self, x: &mut Tensor) {
        let c = self.channels();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = v.clamp(self.lo[ch], self.hi[ch]);
        }
    }

    /// Uniform random point in the ε-ball around x, clamped to the range.
    pub fn random_ball_point(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        let c = self.channels();
        let data: Vec<f32> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let e = self.eps[i % c];
                let jittered = if e > 0.0 { v + rng.gen_range(-e..=e) } else { v };
                jittered.clamp(self.lo[i % c], self.hi[i % c])
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("ball point shape")
    }
}

/// Loss maximized by the inner attack loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerLoss {
    Ce,
    Kl,
}

/// A frozen model viewed through one gradient path. For spiking networks the
/// crafting surrogate may differ from the configured one, and structural
/// surrogates (rate-level and analog-substitute) replace the temporal graph
/// entirely while clean/adversarial success is always judged on the true
/// spiking forward.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    pub net: &'a Network,
    pub snn: Option<&'a SnnConfig>,
    pub stats: StatsMode,
    pub surrogate: Option<SurrogateSpec>,
}

impl<'a> ModelView<'a> {
    pub fn ann(net: &'a Network, stats: StatsMode) -> Self {
        ModelView {
            net,
            snn: None,
            stats,
            surrogate: None,
        }
    }

    pub fn snn(net: &'a Network, cfg: &'a SnnConfig, stats: StatsMode) -> Self {
        ModelView {
            net,
            snn: Some(cfg),
            stats,
            surrogate: None,
        }
    }

    pub fn with_surrogate(mut self, spec: SurrogateSpec) -> Self {
        self.surrogate = Some(spec);
        self
    }

    fn craft_cfg(&self, cfg: &SnnConfig) -> SnnConfig {
        let mut c = cfg.clone();
        if let Some(s) = self.surrogate {
            c.surrogate = s;
        }
        c
    }

    /// True-model logits, no gradients. For SNNs this is always the temporal
    /// spiking forward regardless of the crafting surrogate.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, AdvError> {
        match self.snn {
            None => Ok(crate::nn::ann_logits_with(self.net, x, self.stats)?),
            Some(cfg) => {
                let (l, _) = snn_logits(self.net, x, cfg, self.stats)?;
                Ok(l)
            }
        }
    }

    /// Build a fresh graph with x bound as a differentiable leaf and return
    /// (graph, input var, logits var) under this view's gradient path.
    pub fn forward_diff(&self, x: &Tensor) -> Result<(Graph, Var, Var), AdvError> {
        let g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        match self.snn {
            None => {
                debug_assert_eq!(self.net.mode, NetMode::Ann);
                let pass = ann_forward(&g, self.net, xv, self.stats, false)?;
                Ok((g, xv, pass.logits))
            }
            Some(cfg) => {
                let craft = self.craft_cfg(cfg);
                if needs_structural_path(&craft.surrogate) {
                    let rec = record_run(self.net, x, &craft, self.stats)?;
                    let logits = match craft.surrogate.kind {
                        crate::surrogate::SurrogateKind::Bptr => {
                            rate_graph_forward(&g, self.net, xv, &craft, &rec)?
                        }
                        _ => relu_substitute_forward(&g, self.net, xv, &craft, &rec)?,
                    };
                    Ok((g, xv, logits))
                } else {
                    let s0 = encode_direct(&g, xv, craft.t)?;
                    let pass = temporal_forward(
                        &g,
                        self.net,
                        s0,
                        &craft,
                        &SnnPassOptions::input_grad(self.stats),
                    )?;
                    Ok((g, xv, pass.logits.expect("full pass")))
                }
            }
        }
    }
}

/// Crafted perturbation plus instrumentation.
pub struct AttackOutcome {
    pub x_adv: Tensor,
    /// Number of backward passes performed while crafting.
    pub grad_evals: usize,
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn input_gradient(
    model: &ModelView,
    x: &Tensor,
    y: &[usize],
    inner: InnerLoss,
    clean_logits: Option<&Tensor>,
) -> Result<Tensor, AdvError> {
    let (g, xv, logits) = model.forward_diff(x)?;
    let loss = match inner {
        InnerLoss::Ce => losses::cross_entropy(&g, logits, y)?,
        InnerLoss::Kl => {
            let clean = clean_logits
                .ok_or_else(|| AdvError::Config("KL inner loss needs clean logits".into()))?;
            let cv = g.leaf(clean.clone(), false);
            losses::kl_divergence(&g, logits, cv)?
        }
    };
    let mut grads = g.backward(loss)?;
    grads
        .take(xv)
        .ok_or_else(|| AdvError::Config("input gradient unavailable".into()))
}

/// Projected gradient ascent on the inner loss: `steps` sign steps of size
/// η_c from a uniformly random start (optional), each followed by exact
/// projection onto the ε-ball intersected with the valid range.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack(
    model: &ModelView,
    x: &Tensor,
    y: &[usize],
    space: &InputSpace,
    steps: usize,
    eta: &[f32],
    inner: InnerLoss,
    random_start: bool,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome, AdvError> {
    if steps == 0 {
        return Err(AdvError::Config("pgd needs steps >= 1".into()));
    }
    let clean_logits = match inner {
        InnerLoss::Kl => Some(model.logits(x)?),
        InnerLoss::Ce => None,
    };
    let mut x_adv = if random_start {
        space.random_ball_point(x, rng)
    } else {
        x.clone()
    };
    let c = space.channels();
    let mut grad_evals = 0;
    for _ in 0..steps {
        let grad = input_gradient(model, &x_adv, y, inner, clean_logits.as_ref())?;
        grad_evals += 1;
        let gd = grad.data();
        for (i, v) in x_adv.data_mut().iter_mut().enumerate() {
            *v += eta[i % c] * sign(gd[i]);
        }
        space.project(&mut x_adv, x);
    }
    Ok(AttackOutcome { x_adv, grad_evals })
}

/// Single sign step of size ε from x itself (no random start).
pub fn fgsm_attack(
    model: &ModelView,
    x: &Tensor,
    y: &[usize],
    space: &InputSpace,
    inner: InnerLoss,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome, AdvError> {
    pgd_attack(model, x, y, space, 1, &space.eps, inner, false, rng)
}

/// Randomized single-step KL-ascent: jump α·sign(N(0,I)) to x', take one
/// gradient of KL(f(x') ‖ f(x)), step (ε−α)·sign(∇), and project. Exactly
/// one backward pass.
pub fn rfgsm_attack(
    model: &ModelView,
    x: &Tensor,
    clean_logits: &Tensor,
    space: &InputSpace,
    alpha: &[f32],
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome, AdvError> {
    let c = space.channels();
    for ch in 0..c {
        if alpha[ch] > space.eps[ch] {
            return Err(AdvError::Config(format!(
                "rfgsm alpha {} exceeds epsilon {} on channel {ch}",
                alpha[ch], space.eps[ch]
            )));
        }
    }
    let noise = Tensor::rand_normal(x.shape(), rng);
    let mut x_prime = x.clone();
    for (i, v) in x_prime.data_mut().iter_mut().enumerate() {
        *v += alpha[i % c] * sign(noise.data()[i]);
    }
    let grad = input_gradient(model, &x_prime, &[], InnerLoss::Kl, Some(clean_logits))?;
    let gd = grad.data();
    let mut x_adv = x_prime;
    for (i, v) in x_adv.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v += (space.eps[ch] - alpha[ch]) * sign(gd[i]);
    }
    space.project(&mut x_adv, x);
    Ok(AttackOutcome {
        x_adv,
        grad_evals: 1,
    })
}
