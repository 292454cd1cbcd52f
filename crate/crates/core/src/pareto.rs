//! Composite reward and epoch-wise adaptation of the reward weights.
//!
//! The reward for a record is `r = Σ ω_m y_m` with `ω` on the probability
//! simplex and inside `[ω_min, ω_max]`. After a warm-up, each epoch moves
//! weight towards behaviours whose validation UAUC fell:
//!
//! ```text
//! ω'_m ∝ ω_m + γ (u_prev_m − u_cur_m)
//! ```
//!
//! followed by clipping to the bounds. The `literal-alg1` mode uses the
//! opposite sign for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParetoMode {
    /// Weight rises when a behaviour's UAUC drops.
    #[default]
    Adaptive,
    /// Weights stay at their initial values.
    Static,
    /// `ω − γ(u_prev − u_cur)`: weight falls when UAUC drops.
    LiteralAlg1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParetoConfig {
    pub mode: ParetoMode,
    pub gamma: f64,
    pub warmup_epochs: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub eps: f64,
    pub max_epochs: usize,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        Self {
            mode: ParetoMode::Adaptive,
            gamma: 0.5,
            warmup_epochs: 2,
            omega_min: 0.05,
            omega_max: 0.8,
            eps: 1e-3,
            max_epochs: 30,
        }
    }
}

impl ParetoConfig {
    /// Check the constants against a task count `m`.
    pub fn validate(&self, m: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if m == 0 {
            return bad("at least one task is required".into());
        }
        if !(self.gamma > 0.0) {
            return bad(format!("pareto gamma must be positive, got {}", self.gamma));
        }
        if !(self.eps > 0.0) {
            return bad(format!("pareto eps must be positive, got {}", self.eps));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.warmup_epochs >= self.max_epochs && self.max_epochs > 1 {
            return bad(format!(
                "warm-up of {} epochs leaves no adaptive epoch below the cap of {}",
                self.warmup_epochs, self.max_epochs
            ));
        }
        if m > 1 {
            let u = 1.0 / m as f64;
            if !(0.0 <= self.omega_min && self.omega_min < u && u < self.omega_max && self.omega_max <= 1.0)
            {
                return bad(format!(
                    "need 0 <= omega_min < 1/{m} < omega_max <= 1, got [{}, {}]",
                    self.omega_min, self.omega_max
                ));
            }
        }
        Ok(())
    }
}

/// Reward weights on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights(pub Vec<f64>);

impl RewardWeights {
    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `r = Σ ω_m y_m`.
pub fn compose_reward(y: &[u8], omega: &RewardWeights) -> Result<f64> {
    if y.len() != omega.len() {
        return Err(Error::shape(format!(
            "{} labels for {} reward weights",
            y.len(),
            omega.len()
        )));
    }
    let mut r = 0.0;
    for (&label, &w) in y.iter().zip(&omega.0) {
        match label {
            0 => {}
            1 => r += w,
            other => return Err(Error::arg(format!("label {other} is not binary"))),
        }
    }
    Ok(r)
}

/// Clip into `[lo, hi]` and restore `Σ = 1` by rescaling the coordinates
/// not pinned at a bound, repeating until no coordinate leaves the box.
pub fn project_to_bounds(w: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let m = w.len();
    if m == 1 {
        return vec![1.0];
    }
    let mut out: Vec<f64> = w.iter().map(|v| v.clamp(lo, hi)).collect();
    let mut pinned = vec![false; m];
    for _ in 0..=m {
        let total: f64 = out.iter().sum();
        let residual = 1.0 - total;
        if residual.abs() <= 1e-15 {
            break;
        }
        for i in 0..m {
            if (residual > 0.0 && out[i] >= hi) || (residual < 0.0 && out[i] <= lo) {
                pinned[i] = true;
            }
        }
        let fixed: f64 = (0..m).filter(|&i| pinned[i]).map(|i| out[i]).sum();
        let free: f64 = (0..m).filter(|&i| !pinned[i]).map(|i| out[i]).sum();
        let free_count = pinned.iter().filter(|p| !**p).count();
        if free_count == 0 {
            break;
        }
        let target = 1.0 - fixed;
        for i in (0..m).filter(|&i| !pinned[i]) {
            out[i] = if free > 0.0 {
                out[i] * target / free
            } else {
                target / free_count as f64
            };
            out[i] = out[i].clamp(lo, hi);
        }
    }
    out
}

/// `ω ∝ 1/rate`, projected into the configured bounds.
pub fn init_weights(positive_rates: &[f64], omega_min: f64, omega_max: f64) -> Result<RewardWeights> {
    if positive_rates.is_empty() {
        return Err(Error::arg("no positive rates given"));
    }
    if let Some(r) = positive_rates.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::arg(format!("positive rate must be > 0, got {r}")));
    }
    let inv: Vec<f64> = positive_rates.iter().map(|r| 1.0 / r).collect();
    let s: f64 = inv.iter().sum();
    let w: Vec<f64> = inv.iter().map(|v| v / s).collect();
    Ok(RewardWeights(project_to_bounds(&w, omega_min, omega_max)))
}

/// Result of one adaptation step.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoStep {
    pub weights: RewardWeights,
    pub applied: bool,
}

/// One adaptation step from the change in per-task UAUC.
pub fn pareto_update(
    omega: &RewardWeights,
    u_prev: &[f64],
    u_cur: &[f64],
    cfg: &ParetoConfig,
) -> Result<ParetoStep> {
    let m = omega.len();
    if u_prev.len() != m || u_cur.len() != m {
        return Err(Error::shape(format!(
            "{m} weights but UAUC vectors of length {} and {}",
            u_prev.len(),
            u_cur.len()
        )));
    }
    if cfg.mode == ParetoMode::Static || u_prev == u_cur {
        return Ok(ParetoStep {
            weights: omega.clone(),
            applied: cfg.mode != ParetoMode::Static,
        });
    }
    let sign = match cfg.mode {
        ParetoMode::LiteralAlg1 => -1.0,
        _ => 1.0,
    };
    let raw: Vec<f64> = (0..m)
        .map(|i| omega.0[i] + sign * cfg.gamma * (u_prev[i] - u_cur[i]))
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        log::warn!("reward-weight update rejected: unnormalisable sum {total}");
        return Ok(ParetoStep {
            weights: omega.clone(),
            applied: false,
        });
    }
    let normalised: Vec<f64> = raw.iter().map(|v| v / total).collect();
    Ok(ParetoStep {
        weights: RewardWeights(project_to_bounds(&normalised, cfg.omega_min, cfg.omega_max)),
        applied: true,
    })
}

/// The normalised update before clipping, exposed for inspection.
pub fn pre_clip_update(omega: &[f64], u_prev: &[f64], u_cur: &[f64], gamma: f64) -> Vec<f64> {
    let raw: Vec<f64> = omega
        .iter()
        .zip(u_prev.iter().zip(u_cur))
        .map(|(w, (p, c))| w + gamma * (p - c))
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// `‖ω_cur − ω_prev‖₁ < eps`.
pub fn converged(omega_prev: &RewardWeights, omega_cur: &RewardWeights, eps: f64) -> bool {
    let l1: f64 = omega_prev
        .0
        .iter()
        .zip(&omega_cur.0)
        .map(|(a, b)| (a - b).abs())
        .sum();
    l1 < eps
}
