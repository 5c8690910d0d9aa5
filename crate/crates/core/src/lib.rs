//! Adversarially robust spiking networks on the desk scale: train robust ANNs,
//! convert them to SNNs by threshold calibration, finetune with surrogate
//! BPTT against single-step adversaries, and evaluate with an ensemble of
//! surrogate-gradient white-box attacks plus black-box transfer baselines.

pub mod attack;
pub mod autograd;
pub mod ckpt;
pub mod convert;
pub mod data;
pub mod nn;
pub mod snn;
pub mod surrogate;
pub mod tensor;
pub mod train;

pub use autograd::{BnStats, Gradients, Graph, GraphError, Var};
pub use surrogate::{ensemble_grid, surrogate_value, SurrogateKind, SurrogateSpec};
pub use tensor::{Tensor, TensorError};
