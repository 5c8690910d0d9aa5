//! Analog-to-spiking conversion: weight/affine transfer plus percentile-based
//! threshold initialization.
//!
//! Conversion reinterprets the trained analog net as a spiking one. Weights
//! and normalization affines carry over verbatim; running statistics are
//! discarded (reset to mean 0, variance 1) and re-estimated later during
//! finetuning. Thresholds are then initialized layer by layer, in order: for
//! each spiking layer, run a long direct-coded forward (T_c steps, per-batch
//! normalization statistics) on calibration batches, record every post-norm
//! pre-activation value the neuron would compare against its threshold, and
//! take the maximum over batches of the per-batch ρ-percentile. Layers
//! calibrated earlier spike normally while deeper layers are measured.
//! Finally every threshold is scaled by κ < 1, trading a denser spike code
//! for easier downstream finetuning.

use crate::nn::{Layer, NetMode, Network, StatsMode};
use crate::snn::{encode_direct, temporal_forward, SnnConfig, SnnError, SnnPassOptions};
use crate::surrogate::SurrogateSpec;
use crate::tensor::Tensor;
use crate::Graph;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("source network is not in analog mode")]
    NotAnalog,
    #[error("architectures differ: {0:?}")]
    ArchMismatch(Vec<String>),
    #[error("calibration requires at least one batch")]
    EmptyCalibration,
    #[error("layer {layer}: calibration pre-activations give non-positive threshold {value}; model is degenerate")]
    Degenerate { layer: usize, value: f32 },
    #[error("invalid calibration config: {0}")]
    Config(String),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Graph(#[from] crate::GraphError),
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CalibrationConfig {
    /// Calibration sequence length; should be much larger than the runtime T.
    pub t_c: usize,
    pub num_batches: usize,
    pub batch_size: usize,
    /// Percentile in (0, 100].
    pub rho: f32,
    /// Post-calibration threshold scale in (0, 1]; values below 1 promote a
    /// larger number of spikes.
    pub kappa: f32,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            t_c: 100,
            num_batches: 10,
            batch_size: 64,
            rho: 99.7,
            kappa: 0.3,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self, runtime_t: usize) -> Result<(), ConvertError> {
        if self.t_c < runtime_t {
            return Err(ConvertError::Config(format!(
                "calibration length T_c={} must be >= runtime T={runtime_t}",
                self.t_c
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 100.0) {
            return Err(ConvertError::Config(format!(
                "rho must be in (0,100], got {}",
                self.rho
            )));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(ConvertError::Config(format!(
                "kappa must be in (0,1], got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// Nearest-rank percentile: the value at 1-based rank ceil(n·ρ/100) of the
/// ascending sort. For a constant sample any ρ returns that constant; for
/// 1..=1000 and ρ=99.7 the rank is 997.
pub fn nearest_rank_percentile(sample: &[f32], rho: f32) -> f32 {
    assert!(!sample.is_empty(), "percentile of empty sample");
    let n = sample.len();
    let rank = ((n as f64) * (rho as f64) / 100.0).ceil() as usize;
    let rank = rank.clamp(1, n);
    let mut buf = sample.to_vec();
    let (_, val, _) = buf.select_nth_unstable_by(rank - 1, f32::total_cmp);
    *val
}

/// Compare two networks structurally (layer kinds and parameter shapes),
/// returning the list of differences.
pub fn architecture_diff(a: &Network, b: &Network) -> Vec<String> {
    let mut diffs = Vec::new();
    if a.layers.len() != b.layers.len() {
        diffs.push(format!(
            "layer count {} vs {}",
            a.layers.len(),
            b.layers.len()
        ));
        return diffs;
    }
    for (i, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        let shape = |l: &Layer| -> Option<Vec<usize>> {
            match l {
                Layer::Dense { w } | Layer::Conv2d { w, .. } => Some(w.shape().to_vec()),
                Layer::Norm(p) => Some(vec![p.channels()]),
                _ => None,
            }
        };
        let (ka, kb) = (
            std::mem::discriminant(la),
            std::mem::discriminant(lb),
        );
        if ka != kb {
            diffs.push(format!(
                "layer {i}: {} vs {}",
                la.kind_name(a.mode),
                lb.kind_name(b.mode)
            ));
        } else if shape(la) != shape(lb) {
            diffs.push(format!(
                "layer {i} ({}): shape {:?} vs {:?}",
                la.kind_name(a.mode),
                shape(la),
                shape(lb)
            ));
        }
    }
    diffs
}

/// Reinterpret a trained analog net as a spiking net: weights and affines
/// verbatim, running statistics reset to (0, 1), thresholds at their
/// uncalibrated placeholder value.
pub fn transfer_weights(ann: &Network) -> Result<Network, ConvertError> {
    if ann.mode != NetMode::Ann {
        return Err(ConvertError::NotAnalog);
    }
    let mut snn = ann.clone();
    snn.mode = NetMode::Snn;
    for layer in &mut snn.layers {
        match layer {
            Layer::Norm(p) => p.reset_running(),
            Layer::Neuron { v_th } => *v_th = Tensor::full(&[1], 1.0),
            _ => {}
        }
    }
    Ok(snn)
}

/// Threshold initialization. `batches` are normalized input batches; the
/// dynamics (tau, reset) come from `snn_cfg`, while coding is always direct
/// and normalization always uses current-batch statistics during calibration.
/// Returns the per-layer thresholds that were set (layer index, value).
pub fn calibrate_thresholds(
    net: &mut Network,
    batches: &[Tensor],
    cal: &CalibrationConfig,
    snn_cfg: &SnnConfig,
) -> Result<Vec<(usize, f32)>, ConvertError> {
    cal.validate(snn_cfg.t)?;
    if batches.is_empty() {
        return Err(ConvertError::EmptyCalibration);
    }
    let probe_cfg = SnnConfig {
        t: cal.t_c,
        tau: snn_cfg.tau,
        reset: snn_cfg.reset,
        encoding: crate::snn::Encoding::Direct,
        surrogate: SurrogateSpec::training_default(),
    };
    let neuron_layers: Vec<usize> = net
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| matches!(l, Layer::Neuron { .. }).then_some(i))
        .collect();
    let mut set = Vec::with_capacity(neuron_layers.len());
    for &ni in &neuron_layers {
        debug_assert!(ni > 0, "neuron layer cannot be first");
        let mut best = f32::NEG_INFINITY;
        for batch in batches {
            let g = Graph::new();
            let xv = g.leaf(batch.clone(), false);
            let s0 = encode_direct(&g, xv, probe_cfg.t)?;
            let opts = SnnPassOptions {
                stats: StatsMode::Batch,
                trainable: false,
                grad: false,
                stop_after: Some(ni - 1),
            };
            let pass = temporal_forward(&g, net, s0, &probe_cfg, &opts)?;
            let probe = pass.probe.expect("probe requested");
            best = best.max(nearest_rank_percentile(probe.data(), cal.rho));
        }
        if !(best > 0.0) {
            return Err(ConvertError::Degenerate {
                layer: ni,
                value: best,
            });
        }
        // Set immediately (unscaled) so deeper layers calibrate against a
        // spiking, not saturated, earlier network.
        if let Layer::Neuron { v_th } = &mut net.layers[ni] {
            *v_th = Tensor::full(&[1], best);
        }
        set.push((ni, best));
    }
    // Scale after all layers are calibrated.
    for (ni, value) in &mut set {
        let scaled = *value * cal.kappa;
        if let Layer::Neuron { v_th } = &mut net.layers[*ni] {
            *v_th = Tensor::full(&[1], scaled);
        }
        *value = scaled;
    }
    Ok(set)
}

/// Full conversion: transfer then calibrate.
pub fn convert(
    ann: &Network,
    batches: &[Tensor],
    cal: &CalibrationConfig,
    snn_cfg: &SnnConfig,
) -> Result<(Network, Vec<(usize, f32)>), ConvertError> {
    let mut snn = transfer_weights(ann)?;
    let thresholds = calibrate_thresholds(&mut snn, batches, cal, snn_cfg)?;
    Ok((snn, thresholds))
}
