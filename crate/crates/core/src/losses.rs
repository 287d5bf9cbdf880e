//! Classification, masked reconstruction, and the adaptive joint loss.
//!
//! The joint loss is `l_cls + λ·l_mse`. In adaptive mode λ is the detached
//! ratio `l_cls / max(l_mse, ε)`, recomputed for every batch; it scales the
//! reconstruction gradient but receives none itself.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};

pub const LAMBDA_EPS: f64 = 1e-8;

/// Mean negative log-likelihood; labels outside `[0, K)` are a contract error.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseReduction {
    /// `Σ m⊙(x_rec − x)² / Σm`.
    #[default]
    Mean,
    /// `Σ m⊙(x_rec − x)²`.
    Sum,
    /// `‖m⊙(x_rec − x)‖₂`.
    Norm,
}

impl FromStr for MseReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            "norm" => Ok(Self::Norm),
            _ => Err(Error::config("mse_reduction", format!("unknown reduction `{s}` (mean, sum, norm)"))),
        }
    }
}

impl fmt::Display for MseReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
            Self::Norm => "norm",
        })
    }
}

/// Squared reconstruction error restricted to pixels where `mask == 1`.
/// Returns the loss and whether the mask was empty (loss is then 0).
pub fn masked_mse<T: Real>(
    g: &mut Graph<T>,
    x_rec: Var,
    target: Var,
    mask: &[f32],
    reduction: MseReduction,
) -> Result<(Var, bool)> {
    let diff = g.sub(x_rec, target)?;
    let masked = g.mul_const(diff, mask)?;
    let sq = g.mul(masked, masked)?;
    let s = g.sum(sq);
    let count: f64 = mask.iter().map(|&m| m as f64).sum();
    if count == 0.0 {
        return Ok((g.scale(s, T::zero()), true));
    }
    let loss = match reduction {
        MseReduction::Mean => g.scale(s, T::of(1.0 / count)),
        MseReduction::Sum => s,
        // Zero residual: the norm has no gradient there; use the zero subgradient.
        MseReduction::Norm if g.item(s) == T::zero() => g.scale(s, T::zero()),
        MseReduction::Norm => g.sqrt(s)?,
    };
    Ok((loss, false))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
#[derive(Default)]
pub enum LambdaMode {
    #[default]
    Adaptive,
    Fixed(f64),
}


impl FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(Self::Adaptive);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .map(Self::Fixed)
            .ok_or_else(|| Error::config("lambda", format!("expected `adaptive` or a non-negative number, got `{s}`")))
    }
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Adaptive => f.write_str("adaptive"),
            Self::Fixed(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointLossReport {
    pub l_cls: f64,
    pub l_mse: f64,
    pub lambda: f64,
    pub total: f64,
    pub epsilon_guard_triggered: bool,
}

/// Combines the task losses. Either term may be absent (single-task runs):
/// classification only gives `λ = 0`; reconstruction only gives `λ = 1`.
/// `mask_empty` is the guard flag from [`masked_mse`].
pub fn joint_loss<T: Real>(
    g: &mut Graph<T>,
    l_cls: Option<Var>,
    l_mse: Option<(Var, bool)>,
    mode: LambdaMode,
) -> Result<(Var, JointLossReport)> {
    let val = |g: &Graph<T>, v: Var| g.item(v).to_f64().unwrap_or(f64::NAN);
    let c = l_cls.map(|v| val(g, v));
    let m = l_mse.map(|(v, _)| val(g, v));
    for (name, x) in [("l_cls", c), ("l_mse", m)] {
        if let Some(x) = x {
            if !x.is_finite() {
                return Err(Error::Abort(format!("{name} is {x}")));
            }
        }
    }
    let mut guard = l_mse.is_some_and(|(_, empty)| empty);
    let (total, lambda) = match (l_cls, l_mse) {
        (Some(cv), Some((mv, _))) => {
            let (c, m) = (c.unwrap_or(0.0), m.unwrap_or(0.0));
            let lambda = match mode {
                LambdaMode::Adaptive => {
                    if m <= LAMBDA_EPS {
                        guard = true;
                    }
                    c / m.max(LAMBDA_EPS)
                }
                LambdaMode::Fixed(l) => l,
            };
            // λ enters as a constant multiplier: no graph edge to either loss.
            let weighted = g.scale(mv, T::of(lambda));
            (g.add(cv, weighted)?, lambda)
        }
        (Some(cv), None) => (cv, 0.0),
        (None, Some((mv, _))) => (mv, 1.0),
        (None, None) => return Err(Error::contract("joint loss needs at least one task")),
    };
    let report = JointLossReport {
        l_cls: c.unwrap_or(0.0),
        l_mse: m.unwrap_or(0.0),
        lambda,
        total: val(g, total),
        epsilon_guard_triggered: guard,
    };
    Ok((total, report))
}
