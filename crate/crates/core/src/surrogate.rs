//! Surrogate gradients for the spike nonlinearity.
//!
//! The spike function H(z) (z = membrane potential minus threshold) has zero
//! derivative almost everywhere, so backward passes substitute a surrogate.
//! Four pointwise families are supported plus two structural modes (BPTR and
//! ConversionReLU) that reroute gradients instead of evaluating a pointwise
//! function; those two are handled by the temporal forward in `crate::snn` and
//! reject pointwise evaluation here.

use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SurrogateError {
    #[error("{0:?} is a structural gradient mode, not a pointwise function")]
    NotPointwise(SurrogateKind),
    #[error("surrogate parameter {name} must be positive, got {value}")]
    NonPositiveParam { name: &'static str, value: f32 },
    #[error("cannot parse surrogate spec {0:?}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SurrogateKind {
    /// (1/gamma_w^2) * max(0, gamma_w - |z|): triangular bump of width gamma_w.
    PiecewiseLinear,
    /// gamma_d * exp(-gamma_s * |z|).
    Exponential,
    /// (1/gamma_w) * 1[|z| < gamma_w/2]; strict inequality, boundary gives 0.
    Rectangular,
    /// Straight-through estimator: derivative 1 everywhere.
    Ste,
    /// Backpropagation through per-layer firing rates; a single rate-level STE,
    /// no accumulation through time, zero-rate neurons blocked.
    Bptr,
    /// Backward recomputed as if each spiking neuron were ReLU applied to its
    /// pre-activation (normalization kept with its forward-time statistics).
    ConversionRelu,
}

/// One gradient approximation: a kind plus its named parameters. Parameters not
/// used by the kind are ignored (kept at their defaults).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    /// Width parameter (piecewise-linear and rectangular).
    pub gamma_w: f32,
    /// Dampening factor (exponential).
    pub gamma_d: f32,
    /// Steepness (exponential).
    pub gamma_s: f32,
}

impl SurrogateSpec {
    pub fn piecewise_linear(gamma_w: f32) -> Result<Self, SurrogateError> {
        check_positive("gamma_w", gamma_w)?;
        Ok(Self {
            kind: SurrogateKind::PiecewiseLinear,
            gamma_w,
            gamma_d: 1.0,
            gamma_s: 1.0,
        })
    }

    pub fn exponential(gamma_d: f32, gamma_s: f32) -> Result<Self, SurrogateError> {
        check_positive("gamma_d", gamma_d)?;
        check_positive("gamma_s", gamma_s)?;
        Ok(Self {
            kind: SurrogateKind::Exponential,
            gamma_w: 1.0,
            gamma_d,
            gamma_s,
        })
    }

    pub fn rectangular(gamma_w: f32) -> Result<Self, SurrogateError> {
        check_positive("gamma_w", gamma_w)?;
        Ok(Self {
            kind: SurrogateKind::Rectangular,
            gamma_w,
            gamma_d: 1.0,
            gamma_s: 1.0,
        })
    }

    pub fn ste() -> Self {
        Self {
            kind: SurrogateKind::Ste,
            gamma_w: 1.0,
            gamma_d: 1.0,
            gamma_s: 1.0,
        }
    }

    pub fn bptr() -> Self {
        Self {
            kind: SurrogateKind::Bptr,
            gamma_w: 1.0,
            gamma_d: 1.0,
            gamma_s: 1.0,
        }
    }

    pub fn conversion_relu() -> Self {
        Self {
            kind: SurrogateKind::ConversionRelu,
            gamma_w: 1.0,
            gamma_d: 1.0,
            gamma_s: 1.0,
        }
    }

    /// The default training-time surrogate: piecewise linear with unit width
    /// (dampening factor 1), d/dz = max(0, 1 - |z|).
    pub fn training_default() -> Self {
        Self::piecewise_linear(1.0).expect("unit width is positive")
    }

    /// True for kinds that evaluate pointwise on z during BPTT.
    pub fn is_pointwise(&self) -> bool {
        !matches!(
            self.kind,
            SurrogateKind::Bptr | SurrogateKind::ConversionRelu
        )
    }
}

fn check_positive(name: &'static str, value: f32) -> Result<(), SurrogateError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(SurrogateError::NonPositiveParam { name, value })
    }
}

/// Pointwise surrogate derivative at pre-threshold z. Errors for the two
/// structural modes, which have no pointwise form.
pub fn surrogate_value(spec: &SurrogateSpec, z: f32) -> Result<f32, SurrogateError> {
    match spec.kind {
        SurrogateKind::PiecewiseLinear => {
            let g = spec.gamma_w;
            Ok((1.0 / (g * g)) * (g - z.abs()).max(0.0))
        }
        SurrogateKind::Exponential => Ok(spec.gamma_d * (-spec.gamma_s * z.abs()).exp()),
        SurrogateKind::Rectangular => {
            let g = spec.gamma_w;
            if z.abs() < g / 2.0 {
                Ok(1.0 / g)
            } else {
                Ok(0.0)
            }
        }
        SurrogateKind::Ste => Ok(1.0),
        SurrogateKind::Bptr | SurrogateKind::ConversionRelu => {
            Err(SurrogateError::NotPointwise(spec.kind))
        }
    }
}

/// The full attack-ensemble grid, fixed order: 5 piecewise-linear widths,
/// 6 exponential (dampening, steepness) pairs, 5 rectangular widths, STE,
/// BPTR, ConversionReLU — 19 members.
pub fn ensemble_grid() -> Vec<SurrogateSpec> {
    let mut grid = Vec::with_capacity(19);
    for gw in [0.25f32, 0.5, 1.0, 2.0, 3.0] {
        grid.push(SurrogateSpec::piecewise_linear(gw).expect("positive"));
    }
    for (gd, gs) in [
        (0.3f32, 0.5f32),
        (0.3, 1.0),
        (0.3, 2.0),
        (1.0, 0.5),
        (1.0, 1.0),
        (1.0, 2.0),
    ] {
        grid.push(SurrogateSpec::exponential(gd, gs).expect("positive"));
    }
    for gw in [0.25f32, 0.5, 1.0, 2.0, 4.0] {
        grid.push(SurrogateSpec::rectangular(gw).expect("positive"));
    }
    grid.push(SurrogateSpec::ste());
    grid.push(SurrogateSpec::bptr());
    grid.push(SurrogateSpec::conversion_relu());
    grid
}

/// Compact number formatting for spec tokens: no trailing zeros, no sci notation
/// for the parameter ranges in use.
fn fmt_param(v: f32) -> String {
    let s = format!("{v}");
    s
}

impl fmt::Display for SurrogateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SurrogateKind::PiecewiseLinear => write!(f, "pl:{}", fmt_param(self.gamma_w)),
            SurrogateKind::Exponential => {
                write!(f, "exp:{}:{}", fmt_param(self.gamma_d), fmt_param(self.gamma_s))
            }
            SurrogateKind::Rectangular => write!(f, "rect:{}", fmt_param(self.gamma_w)),
            SurrogateKind::Ste => write!(f, "ste"),
            SurrogateKind::Bptr => write!(f, "bptr"),
            SurrogateKind::ConversionRelu => write!(f, "conv-relu"),
        }
    }
}

impl serde::Serialize for SurrogateSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for SurrogateSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let token = <String as serde::Deserialize>::deserialize(d)?;
        token.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for SurrogateSpec {
    type Err = SurrogateError;

    /// Parses the same tokens Display emits: `pl:W`, `exp:D:S`, `rect:W`,
    /// `ste`, `bptr`, `conv-relu`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || SurrogateError::Parse(s.to_string());
        match parts.as_slice() {
            ["pl", w] => Self::piecewise_linear(w.parse().map_err(|_| bad())?),
            ["exp", d, st] => {
                Self::exponential(d.parse().map_err(|_| bad())?, st.parse().map_err(|_| bad())?)
            }
            ["rect", w] => Self::rectangular(w.parse().map_err(|_| bad())?),
            ["ste"] => Ok(Self::ste()),
            ["bptr"] => Ok(Self::bptr()),
            ["conv-relu"] => Ok(Self::conversion_relu()),
            _ => Err(bad()),
        }
    }
}
