//! Assembly of the training objective: expected NLL under sampled gates,
//! a KL term against the configured prior with optional annealing of its
//! coefficient, and a targeted-depth penalty.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::gate::PriorSpec;

/// Schedule for the KL coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnnealSchedule {
    None,
    /// beta scaled by min(1, step / warmup_steps).
    Linear { warmup_steps: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// KL coefficient.
    pub beta: f64,
    /// Depth-loss coefficient.
    pub lambda: f64,
    /// Target depth for the depth loss.
    pub target_depth: f64,
    pub prior: PriorSpec,
    pub anneal: AnnealSchedule,
}

impl LossConfig {
    /// beta = 1, lambda = 0.1 with a uniform prior and no annealing.
    pub fn default_latent() -> Self {
        LossConfig {
            beta: 1.0,
            lambda: 0.1,
            target_depth: 0.0,
            prior: PriorSpec::Uniform,
            anneal: AnnealSchedule::None,
        }
    }

    pub fn validate(&self) {
        assert!(self.beta >= 0.0, "loss: beta must be nonnegative");
        assert!(self.lambda >= 0.0, "loss: lambda must be nonnegative");
        assert!(self.target_depth >= 0.0, "loss: target depth must be nonnegative");
        if let AnnealSchedule::Linear { warmup_steps } = self.anneal {
            assert!(warmup_steps >= 1, "loss: warmup_steps must be at least 1");
        }
    }
}

/// The decomposition of one step's objective, kept for logging and ablation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub depth_loss: f64,
    pub total: f64,
    pub beta_effective: f64,
}

/// A component of the objective became non-finite; the step must be skipped.
#[derive(Clone, Debug)]
pub struct NonFiniteLoss {
    pub component: &'static str,
    pub value: f64,
}

impl fmt::Display for NonFiniteLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "non-finite loss component `{}` ({})", self.component, self.value)
    }
}

impl std::error::Error for NonFiniteLoss {}

/// |sum_l u_l - K|: the L2 norm of the scalar depth residual.
pub fn target_depth_loss(utilization: &[f64], target: f64) -> f64 {
    let total: f64 = utilization.iter().sum();
    (total - target).abs()
}

/// Effective KL coefficient at a step.
pub fn kl_anneal(step: u64, cfg: &LossConfig) -> f64 {
    match cfg.anneal {
        AnnealSchedule::None => cfg.beta,
        AnnealSchedule::Linear { warmup_steps } => {
            cfg.beta * (step as f64 / warmup_steps as f64).min(1.0)
        }
    }
}

/// total = nll + beta_effective * kl + lambda * depth_loss, with every
/// component retained. Non-finite components abort the step.
pub fn total_loss(
    nll: f64,
    kl_sum: f64,
    utilization: &[f64],
    cfg: &LossConfig,
    step: u64,
) -> Result<LossBreakdown, NonFiniteLoss> {
    for (name, v) in [("nll", nll), ("kl", kl_sum)] {
        if !v.is_finite() {
            return Err(NonFiniteLoss { component: name, value: v });
        }
    }
    let depth_loss = target_depth_loss(utilization, cfg.target_depth);
    if !depth_loss.is_finite() {
        return Err(NonFiniteLoss { component: "depth_loss", value: depth_loss });
    }
    let beta_effective = kl_anneal(step, cfg);
    let total = nll + beta_effective * kl_sum + cfg.lambda * depth_loss;
    if !total.is_finite() {
        return Err(NonFiniteLoss { component: "total", value: total });
    }
    Ok(LossBreakdown {
        nll,
        kl: kl_sum,
        depth_loss,
        total,
        beta_effective,
    })
}
