//! Layer zoo and architecture builder shared by the analog network and its
//! spiking counterpart. Both interpretations use identical weight shapes, so
//! converting a trained analog net into a spiking one is a reinterpretation of
//! the same parameter set, not a rebuild.
//!
//! Activations are NHWC; conv weights are (kh, kw, cin, cout); dense weights
//! are (in, out).

use crate::autograd::BnStats;
use crate::tensor::Tensor;
use crate::{Graph, GraphError, Var};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unknown architecture '{0}' (expected mlp-small, conv-small, or conv-med)")]
    UnknownArch(String),
    #[error("layer {index} ({kind}) cannot consume input shape {shape:?}")]
    ShapeFlow {
        index: usize,
        kind: String,
        shape: Vec<usize>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Whether the net is currently interpreted with analog activations
/// (norm layers act as standard batch-norm, neurons as ReLU) or as a spiking
/// net (norm layers normalize jointly over batch and time, neurons integrate
/// and fire against their threshold).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetMode {
    Ann,
    Snn,
}

/// Per-channel affine + running statistics for a normalization layer.
#[derive(Debug, Clone)]
pub struct NormParams {
    /// Per-channel scale.
    pub gamma: Tensor,
    /// Per-channel shift.
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    /// EMA momentum: running = (1 - m) * running + m * batch.
    pub momentum: f32,
}

impl NormParams {
    pub fn identity(channels: usize) -> Self {
        NormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Reset running statistics to the (0, 1) initialization state.
    pub fn reset_running(&mut self) {
        let c = self.channels();
        self.running_mean = Tensor::zeros(&[c]);
        self.running_var = Tensor::full(&[c], 1.0);
    }

    pub fn ema_update(&mut self, batch_mean: &[f32], batch_var: &[f32]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    /// Fully connected, weight (in, out), no bias (a norm layer follows, or
    /// it is the readout whose optional bias lives on `Network::output_bias`).
    Dense { w: Tensor },
    /// Convolution, weight (kh, kw, cin, cout), no bias.
    Conv2d { w: Tensor, stride: usize, pad: usize },
    /// Batch-norm in analog mode; joint batch-time norm in spiking mode.
    Norm(NormParams),
    /// ReLU in analog mode; integrate-and-fire unit with trainable threshold
    /// (shape [1]) in spiking mode.
    Neuron { v_th: Tensor },
    AvgPool { k: usize, stride: usize },
    Flatten,
}

impl Layer {
    /// Kind label used in error messages and checkpoint metadata.
    pub fn kind_name(&self, mode: NetMode) -> &'static str {
        match (self, mode) {
            (Layer::Dense { .. }, _) => "dense",
            (Layer::Conv2d { .. }, _) => "conv2d",
            (Layer::Norm(_), NetMode::Ann) => "batchnorm",
            (Layer::Norm(_), NetMode::Snn) => "tdbn",
            (Layer::Neuron { .. }, NetMode::Ann) => "relu",
            (Layer::Neuron { .. }, NetMode::Snn) => "lif",
            (Layer::AvgPool { .. }, _) => "avgpool",
            (Layer::Flatten, _) => "flatten",
        }
    }
}

/// A feed-forward network: layer stack plus the metadata needed to rebuild
/// and re-bind it (architecture name, input shape, class count, mode).
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: String,
    /// (H, W, C) of a single input sample.
    pub in_shape: [usize; 3],
    pub num_classes: usize,
    pub mode: NetMode,
    pub layers: Vec<Layer>,
    /// Optional readout bias (shape [num_classes]); absent until explicitly
    /// enabled (e.g. during spiking finetuning).
    pub output_bias: Option<Tensor>,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("kaiming shape/data")
}

fn dense(inf: usize, outf: usize, rng: &mut impl Rng) -> Layer {
    Layer::Dense {
        w: kaiming_uniform(&[inf, outf], inf, rng),
    }
}

fn conv(kh: usize, kw: usize, cin: usize, cout: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Layer {
    Layer::Conv2d {
        w: kaiming_uniform(&[kh, kw, cin, cout], kh * kw * cin, rng),
        stride,
        pad,
    }
}

fn norm(c: usize) -> Layer {
    Layer::Norm(NormParams::identity(c))
}

fn neuron() -> Layer {
    Layer::Neuron {
        v_th: Tensor::full(&[1], 1.0),
    }
}

/// Build one of the named desk-scale architectures for the given input shape
/// (H, W, C) and class count. Every hidden linear layer is followed by a norm
/// layer and a neuron; the final dense layer is a bare readout.
pub fn build_arch(
    name: &str,
    in_shape: [usize; 3],
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<Network, NnError> {
    let [h, w, c] = in_shape;
    let layers = match name {
        "mlp-small" => vec![
            Layer::Flatten,
            dense(h * w * c, 256, rng),
            norm(256),
            neuron(),
            dense(256, num_classes, rng),
        ],
        "conv-small" => {
            // Two conv blocks (conv -> norm -> neuron -> avgpool), then two
            // dense layers; the first dense keeps the norm+neuron pattern.
            let (h2, w2) = (h / 2, w / 2);
            let (h4, w4) = (h2 / 2, w2 / 2);
            vec![
                conv(3, 3, c, 16, 1, 1, rng),
                norm(16),
                neuron(),
                Layer::AvgPool { k: 2, stride: 2 },
                conv(3, 3, 16, 32, 1, 1, rng),
                norm(32),
                neuron(),
                Layer::AvgPool { k: 2, stride: 2 },
                Layer::Flatten,
                dense(h4 * w4 * 32, 128, rng),
                norm(128),
                neuron(),
                dense(128, num_classes, rng),
            ]
        }
        "conv-med" => {
            // Four conv blocks then two dense layers. Pool output sizes use
            // floor semantics, matching the pooling op.
            let p = |x: usize| (x - 2) / 2 + 1;
            let (mut ph, mut pw) = (p(h), p(w));
            for _ in 0..3 {
                ph = p(ph);
                pw = p(pw);
            }
            vec![
                conv(3, 3, c, 16, 1, 1, rng),
                norm(16),
                neuron(),
                Layer::AvgPool { k: 2, stride: 2 },
                conv(3, 3, 16, 32, 1, 1, rng),
                norm(32),
                neuron(),
                Layer::AvgPool { k: 2, stride: 2 },
                conv(3, 3, 32, 32, 1, 1, rng),
                norm(32),
                neuron(),
                Layer::AvgPool { k: 2, stride: 2 },
                conv(3, 3, 32, 64, 1, 1, rng),
                norm(64),
                neuron(),
                Layer::AvgPool { k: 2, stride: 2 },
                Layer::Flatten,
                dense(ph * pw * 64, 128, rng),
                norm(128),
                neuron(),
                dense(128, num_classes, rng),
            ]
        }
        other => return Err(NnError::UnknownArch(other.to_string())),
    };
    let net = Network {
        arch: name.to_string(),
        in_shape,
        num_classes,
        mode: NetMode::Ann,
        layers,
        output_bias: None,
    };
    net.infer_shapes()?; // fail fast on internally inconsistent composition
    Ok(net)
}

impl Network {
    /// Shape of each layer's output for a batch of size `n=1`, validating
    /// that consecutive layers are compatible.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut shape = vec![1usize, self.in_shape[0], self.in_shape[1], self.in_shape[2]];
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let fail = |shape: &Vec<usize>| NnError::ShapeFlow {
                index,
                kind: layer.kind_name(self.mode).to_string(),
                shape: shape.clone(),
            };
            match layer {
                Layer::Dense { w } => {
                    if shape.len() != 2 || shape[1] != w.shape()[0] {
                        return Err(fail(&shape));
                    }
                    shape = vec![shape[0], w.shape()[1]];
                }
                Layer::Conv2d { w, stride, pad } => {
                    if shape.len() != 4 || shape[3] != w.shape()[2] {
                        return Err(fail(&shape));
                    }
                    let oh = (shape[1] + 2 * pad).checked_sub(w.shape()[0]).map(|v| v / stride + 1);
                    let ow = (shape[2] + 2 * pad).checked_sub(w.shape()[1]).map(|v| v / stride + 1);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                            shape = vec![shape[0], oh, ow, w.shape()[3]];
                        }
                        _ => return Err(fail(&shape)),
                    }
                }
                Layer::Norm(p) => {
                    if *shape.last().unwrap() != p.channels() {
                        return Err(fail(&shape));
                    }
                }
                Layer::Neuron { .. } => {}
                Layer::AvgPool { k, stride } => {
                    if shape.len() != 4 || shape[1] < *k || shape[2] < *k {
                        return Err(fail(&shape));
                    }
                    shape = vec![
                        shape[0],
                        (shape[1] - k) / stride + 1,
                        (shape[2] - k) / stride + 1,
                        shape[3],
                    ];
                }
                Layer::Flatten => {
                    let feat: usize = shape[1..].iter().product();
                    shape = vec![shape[0], feat];
                }
            }
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Names of every tensor the checkpoint must carry, in layer order:
    /// weights, norm affines + running stats, thresholds, optional readout bias.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { .. } | Layer::Conv2d { .. } => names.push(format!("layer{i}.weight")),
                Layer::Norm(_) => {
                    names.push(format!("layer{i}.gamma"));
                    names.push(format!("layer{i}.beta"));
                    names.push(format!("layer{i}.running_mean"));
                    names.push(format!("layer{i}.running_var"));
                }
                Layer::Neuron { .. } => names.push(format!("layer{i}.v_th")),
                _ => {}
            }
        }
        if self.output_bias.is_some() {
            names.push("output_bias".to_string());
        }
        names
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        if name == "output_bias" {
            return self.output_bias.as_ref();
        }
        let rest = name.strip_prefix("layer")?;
        let (idx, field) = rest.split_once('.')?;
        let layer = self.layers.get(idx.parse::<usize>().ok()?)?;
        match (layer, field) {
            (Layer::Dense { w }, "weight") | (Layer::Conv2d { w, .. }, "weight") => Some(w),
            (Layer::Norm(p), "gamma") => Some(&p.gamma),
            (Layer::Norm(p), "beta") => Some(&p.beta),
            (Layer::Norm(p), "running_mean") => Some(&p.running_mean),
            (Layer::Norm(p), "running_var") => Some(&p.running_var),
            (Layer::Neuron { v_th }, "v_th") => Some(v_th),
            _ => None,
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name == "output_bias" {
            return self.output_bias.as_mut();
        }
        let rest = name.strip_prefix("layer")?;
        let (idx, field) = rest.split_once('.')?;
        let layer = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
        match (layer, field) {
            (Layer::Dense { w }, "weight") | (Layer::Conv2d { w, .. }, "weight") => Some(w),
            (Layer::Norm(p), "gamma") => Some(&mut p.gamma),
            (Layer::Norm(p), "beta") => Some(&mut p.beta),
            (Layer::Norm(p), "running_mean") => Some(&mut p.running_mean),
            (Layer::Norm(p), "running_var") => Some(&mut p.running_var),
            (Layer::Neuron { v_th }, "v_th") => Some(v_th),
            _ => None,
        }
    }

    /// Names of the parameters gradient descent may touch in the current
    /// mode. Analog training updates weights and norm affines; spiking
    /// finetuning additionally updates thresholds and the readout bias.
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensor_names()
            .into_iter()
            .filter(|n| {
                if n.ends_with(".running_mean") || n.ends_with(".running_var") {
                    return false;
                }
                if n.ends_with(".v_th") {
                    return self.mode == NetMode::Snn;
                }
                if n == "output_bias" {
                    return self.mode == NetMode::Snn;
                }
                true
            })
            .collect()
    }

    /// Apply EMA updates produced by a training-mode forward pass.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, Vec<f32>, Vec<f32>)]) {
        for (idx, mean, var) in updates {
            if let Layer::Norm(p) = &mut self.layers[*idx] {
                p.ema_update(mean, var);
            }
        }
    }

    /// Lower bound enforced on thresholds after every optimizer step.
    pub const V_TH_FLOOR: f32 = 0.03;

    pub fn clamp_thresholds(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Neuron { v_th } = layer {
                for v in v_th.data_mut() {
                    *v = v.max(Self::V_TH_FLOOR);
                }
            }
        }
    }
}

/// Whether a forward pass uses per-batch normalization statistics (training /
/// calibration) or the stored running averages (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    Batch,
    Running,
}

/// Result of binding the net into a graph and running it forward.
pub struct ForwardPass {
    pub logits: Var,
    /// Trainable-parameter leaves bound this pass, by tensor name.
    pub params: Vec<(String, Var)>,
    /// Per-norm-layer batch statistics (layer index, mean, var) — produced in
    /// Batch mode so the caller can fold them into the running averages.
    pub bn_updates: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

/// Analog forward pass: dense/conv → batch-norm → ReLU, final dense readout.
/// `trainable` controls whether parameter leaves require gradients (attack
/// passes bind them frozen and differentiate the input instead).
pub fn ann_forward(
    g: &Graph,
    net: &Network,
    x: Var,
    stats: StatsMode,
    trainable: bool,
) -> Result<ForwardPass, NnError> {
    debug_assert_eq!(net.mode, NetMode::Ann);
    let mut params = Vec::new();
    let mut bn_updates = Vec::new();
    let mut h = x;
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Dense { w } => {
                let wv = g.leaf(w.clone(), trainable);
                params.push((format!("layer{i}.weight"), wv));
                // Flatten any residual spatial shape into features first.
                let shape = g.shape(h);
                if shape.len() != 2 {
                    let feat: usize = shape[1..].iter().product();
                    h = g.reshape(h, vec![shape[0], feat])?;
                }
                h = g.matmul(h, wv)?;
            }
            Layer::Conv2d { w, stride, pad } => {
                let wv = g.leaf(w.clone(), trainable);
                params.push((format!("layer{i}.weight"), wv));
                h = g.conv2d(h, wv, *stride, *pad)?;
            }
            Layer::Norm(p) => {
                let gv = g.leaf(p.gamma.clone(), trainable);
                let bv = g.leaf(p.beta.clone(), trainable);
                params.push((format!("layer{i}.gamma"), gv));
                params.push((format!("layer{i}.beta"), bv));
                let mode = match stats {
                    StatsMode::Batch => BnStats::Batch,
                    StatsMode::Running => BnStats::Fixed {
                        mean: p.running_mean.data(),
                        var: p.running_var.data(),
                    },
                };
                let (y, batch_stats) = g.batch_norm(h, gv, bv, mode, p.eps)?;
                if let Some((mean, var)) = batch_stats {
                    bn_updates.push((i, mean, var));
                }
                h = y;
            }
            Layer::Neuron { .. } => h = g.relu(h)?,
            Layer::AvgPool { k, stride } => h = g.avgpool(h, *k, *stride)?,
            Layer::Flatten => {
                let shape = g.shape(h);
                let feat: usize = shape[1..].iter().product();
                h = g.reshape(h, vec![shape[0], feat])?;
            }
        }
    }
    if let Some(b) = &net.output_bias {
        let bv = g.leaf(b.clone(), trainable);
        params.push(("output_bias".to_string(), bv));
        h = g.add_bias(h, bv)?;
    }
    Ok(ForwardPass {
        logits: h,
        params,
        bn_updates,
    })
}

/// Convenience inference: logits for a batch, no gradient bookkeeping.
pub fn ann_logits(net: &Network, x: &Tensor) -> Result<Tensor, NnError> {
    ann_logits_with(net, x, StatsMode::Running)
}

/// Value-level analog forward under an explicit normalization-statistics mode.
pub fn ann_logits_with(net: &Network, x: &Tensor, stats: StatsMode) -> Result<Tensor, NnError> {
    let g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let pass = ann_forward(&g, net, xv, stats, false)?;
    Ok(g.value_clone(pass.logits))
}
