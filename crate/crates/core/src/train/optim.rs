//! Momentum SGD with cosine annealing and the firing-threshold floor.

use crate::nn::Network;
use crate::tensor::Tensor;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("gradient shape {grad:?} does not match parameter {name} shape {param:?}")]
    ShapeMismatch {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    CosineAnneal,
    Constant,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub schedule: Schedule,
}

impl OptimConfig {
    pub fn new(
        lr: f32,
        momentum: f32,
        weight_decay: f32,
        epochs: usize,
        schedule: Schedule,
    ) -> Result<Self, OptimError> {
        let cfg = OptimConfig {
            lr,
            momentum,
            weight_decay,
            epochs,
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0) {
            return Err(OptimError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(OptimError::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(OptimError::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at a given epoch: lr₀ at epoch 0, annealing along a half
    /// cosine to 0 at `epochs`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::CosineAnneal => {
                let frac = (epoch as f32 / self.epochs as f32).min(1.0);
                self.lr * 0.5 * (1.0 + (std::f32::consts::PI * frac).cos())
            }
        }
    }
}

/// Momentum SGD over named parameters. Velocity buffers are keyed by
/// parameter name and survive across steps; weight decay enters as an L2
/// gradient term (grad + wd·param) before the momentum update.
pub struct Sgd {
    pub cfg: OptimConfig,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(cfg: OptimConfig) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: HashMap::new(),
        })
    }

    /// One update: param −= lr(epoch) · (momentum·buf + grad + wd·param),
    /// followed by the firing-threshold floor clamp.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &[(String, Tensor)],
        epoch: usize,
    ) -> Result<(), OptimError> {
        let lr = self.cfg.lr_at(epoch);
        for (name, grad) in grads {
            let param = net
                .tensor_mut(name)
                .ok_or_else(|| OptimError::UnknownParam(name.clone()))?;
            if param.shape() != grad.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    grad: grad.shape().to_vec(),
                    param: param.shape().to_vec(),
                });
            }
            let buf = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let pd = param.data_mut();
            let gd = grad.data();
            for i in 0..pd.len() {
                buf[i] = self.cfg.momentum * buf[i] + gd[i] + self.cfg.weight_decay * pd[i];
                pd[i] -= lr * buf[i];
            }
        }
        net.clamp_thresholds();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_arch, NetMode, Network};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net() -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_arch("mlp-small", [2, 2, 1], 3, &mut rng).unwrap()
    }

    #[test]
    fn config_invariants_enforced() {
        assert!(OptimConfig::new(0.0, 0.9, 0.0, 10, Schedule::Constant).is_err());
        assert!(OptimConfig::new(0.1, 1.0, 0.0, 10, Schedule::Constant).is_err());
        assert!(OptimConfig::new(0.1, -0.1, 0.0, 10, Schedule::Constant).is_err());
        assert!(OptimConfig::new(0.1, 0.9, -1.0, 10, Schedule::Constant).is_err());
        assert!(OptimConfig::new(0.1, 0.9, 0.0, 0, Schedule::Constant).is_err());
        assert!(OptimConfig::new(0.1, 0.9, 5e-4, 10, Schedule::CosineAnneal).is_ok());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimConfig::new(0.2, 0.0, 0.0, 10, Schedule::CosineAnneal).unwrap();
        assert!((cfg.lr_at(0) - 0.2).abs() < 1e-7);
        assert!(cfg.lr_at(10).abs() < 1e-7);
        assert!((cfg.lr_at(5) - 0.1).abs() < 1e-7);
        assert!(cfg.lr_at(9) < 0.01);
        let flat = OptimConfig::new(0.2, 0.0, 0.0, 10, Schedule::Constant).unwrap();
        assert_eq!(flat.lr_at(0), 0.2);
        assert_eq!(flat.lr_at(9), 0.2);
    }

    #[test]
    fn plain_sgd_step_decreases_param_by_lr_times_grad() {
        let mut net = tiny_net();
        let name = "layer1.weight".to_string();
        let before = net.tensor(&name).unwrap().data().to_vec();
        let mut grad = Tensor::zeros(net.tensor(&name).unwrap().shape());
        grad.data_mut()[0] = 1.0;
        let cfg = OptimConfig::new(0.1, 0.0, 0.0, 10, Schedule::Constant).unwrap();
        let mut opt = Sgd::new(cfg).unwrap();
        opt.step(&mut net, &[(name.clone(), grad)], 0).unwrap();
        let after = net.tensor(&name).unwrap().data();
        assert!((after[0] - (before[0] - 0.1)).abs() < 1e-7);
        assert_eq!(after[1], before[1]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut net = tiny_net();
        let name = "layer1.weight".to_string();
        let shape = net.tensor(&name).unwrap().shape().to_vec();
        let before = net.tensor(&name).unwrap().data()[0];
        let grad = {
            let mut t = Tensor::zeros(&shape);
            t.data_mut()[0] = 1.0;
            t
        };
        let cfg = OptimConfig::new(0.1, 0.5, 0.0, 10, Schedule::Constant).unwrap();
        let mut opt = Sgd::new(cfg).unwrap();
        opt.step(&mut net, &[(name.clone(), grad.clone())], 0).unwrap();
        opt.step(&mut net, &[(name.clone(), grad)], 0).unwrap();
        // Step 1: buf=1, Δ=0.1. Step 2: buf=1.5, Δ=0.15. Total 0.25.
        let after = net.tensor(&name).unwrap().data()[0];
        assert!((before - after - 0.25).abs() < 1e-6, "{}", before - after);
    }

    #[test]
    fn weight_decay_pulls_toward_zero_without_grad() {
        let mut net = tiny_net();
        let name = "layer1.weight".to_string();
        let shape = net.tensor(&name).unwrap().shape().to_vec();
        net.tensor_mut(&name).unwrap().data_mut()[0] = 1.0;
        let cfg = OptimConfig::new(0.1, 0.0, 0.01, 10, Schedule::Constant).unwrap();
        let mut opt = Sgd::new(cfg).unwrap();
        opt.step(&mut net, &[(name.clone(), Tensor::zeros(&shape))], 0)
            .unwrap();
        let after = net.tensor(&name).unwrap().data()[0];
        assert!((after - (1.0 - 0.1 * 0.01)).abs() < 1e-7);
    }

    #[test]
    fn threshold_floor_clamp_after_update() {
        let mut net = tiny_net();
        net.mode = NetMode::Snn;
        // Find the threshold parameter.
        let vname = net
            .tensor_names()
            .into_iter()
            .find(|n| n.ends_with("v_th"))
            .unwrap();
        net.tensor_mut(&vname).unwrap().data_mut()[0] = 0.031;
        let mut grad = Tensor::zeros(&[1]);
        grad.data_mut()[0] = 10.0; // large positive grad drives v_th down
        let cfg = OptimConfig::new(0.1, 0.0, 0.0, 10, Schedule::Constant).unwrap();
        let mut opt = Sgd::new(cfg).unwrap();
        opt.step(&mut net, &[(vname.clone(), grad)], 0).unwrap();
        assert_eq!(net.tensor(&vname).unwrap().data()[0], 0.03);
    }

    #[test]
    fn unknown_param_and_shape_mismatch_error() {
        let mut net = tiny_net();
        let cfg = OptimConfig::new(0.1, 0.0, 0.0, 10, Schedule::Constant).unwrap();
        let mut opt = Sgd::new(cfg).unwrap();
        assert!(matches!(
            opt.step(&mut net, &[("nope".into(), Tensor::zeros(&[1]))], 0),
            Err(OptimError::UnknownParam(_))
        ));
        assert!(matches!(
            opt.step(&mut net, &[("layer1.weight".into(), Tensor::zeros(&[1]))], 0),
            Err(OptimError::ShapeMismatch { .. })
        ));
    }
}
