//! Sparsity trajectories for iterative pruning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EXPONENTIAL_ALPHA: f64 = 3.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleKind {
    /// Jump to the target at the first iteration.
    OneShot,
    /// Remove the same fraction of the remaining weights every iteration.
    Constant,
    /// Sparsity grows linearly in the iteration index.
    #[default]
    Linear,
    /// Front-loaded decay toward the target, pinned to hit it exactly.
    Exponential { alpha: f64 },
}

impl ScheduleKind {
    pub fn exponential() -> Self {
        ScheduleKind::Exponential {
            alpha: DEFAULT_EXPONENTIAL_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleKind::Exponential { alpha } if !(alpha.is_finite() && *alpha > 0.0) => Err(
                Error::validation("prune.schedule.alpha", "must be finite and positive"),
            ),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::OneShot => "one_shot",
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Exponential { .. } => "exponential",
        }
    }
}

/// Target sparsity after iteration `t` of `total`, starting from `s0` and
/// ending at `sf`.
pub fn sparsity_at(kind: ScheduleKind, t: usize, total: usize, s0: f64, sf: f64) -> Result<f64> {
    kind.validate()?;
    if total == 0 {
        return Err(Error::Contract("schedule needs at least one iteration".into()));
    }
    if t > total {
        return Err(Error::Contract(format!("iteration {t} beyond total {total}")));
    }
    if !(0.0..=1.0).contains(&s0) || !(0.0..=1.0).contains(&sf) || s0 > sf {
        return Err(Error::Contract(format!(
            "need 0 <= s0 <= sf <= 1, got s0={s0}, sf={sf}"
        )));
    }
    if t == 0 {
        return Ok(s0);
    }
    if t == total {
        return Ok(sf);
    }
    let progress = t as f64 / total as f64;
    let s = match kind {
        ScheduleKind::OneShot => sf,
        ScheduleKind::Linear => s0 + (sf - s0) * progress,
        ScheduleKind::Constant => {
            if s0 >= 1.0 {
                1.0
            } else {
                1.0 - (1.0 - s0) * ((1.0 - sf) / (1.0 - s0)).powf(progress)
            }
        }
        ScheduleKind::Exponential { alpha } => {
            let end = (-alpha).exp();
            sf - (sf - s0) * ((-alpha * progress).exp() - end) / (1.0 - end)
        }
    };
    Ok(s.clamp(s0, sf))
}

/// Every target `s_0..=s_T`.
pub fn trajectory(kind: ScheduleKind, total: usize, s0: f64, sf: f64) -> Result<Vec<f64>> {
    (0..=total).map(|t| sparsity_at(kind, t, total, s0, sf)).collect()
}

/// Fraction of the currently surviving weights to prune to move from
/// sparsity `s_prev` to `s_next`.
pub fn iteration_prune_fraction(s_prev: f64, s_next: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s_prev) || !(0.0..=1.0).contains(&s_next) || s_prev > s_next {
        return Err(Error::Contract(format!(
            "need 0 <= s_prev <= s_next <= 1, got {s_prev} -> {s_next}"
        )));
    }
    if s_prev == s_next {
        return Ok(0.0);
    }
    if s_prev >= 1.0 {
        return Err(Error::Contract("nothing left to prune".into()));
    }
    Ok(((s_next - s_prev) / (1.0 - s_prev)).min(1.0))
}
