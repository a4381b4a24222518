//! Per-decision-step reward: weighted collision, efficiency and arrival
//! components.

use serde::{Deserialize, Serialize};

use super::env::Cause;
use crate::kinematics::VehicleState;

/// Weights of the reward components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_collision: f64,
    pub w_efficiency: f64,
    pub w_arrival: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w_collision: 1.0, w_efficiency: 1.0, w_arrival: 1.0 }
    }
}

/// Reward of one decision step.
///
/// * collision component: -1 on the collision step, else 0
/// * efficiency component: `clamp(v/v_max, 0, 1) * dt_decision / episode_norm`
///   using the trapezoid mean of the pre/post speeds, granted every step so a
///   full-horizon episode accumulates at most 1
/// * arrival component: +1 on the arrival step, else 0
pub fn compute_reward(
    prev: &VehicleState,
    new: &VehicleState,
    cause: Cause,
    weights: &RewardWeights,
    v_max: f64,
    dt_decision: f64,
    episode_norm: f64,
) -> f64 {
    let r_c = if cause == Cause::Collided { -1.0 } else { 0.0 };
    let v_mean = 0.5 * (prev.v + new.v);
    let r_e = (v_mean / v_max).clamp(0.0, 1.0) * dt_decision / episode_norm;
    let r_a = if cause == Cause::Arrived { 1.0 } else { 0.0 };
    weights.w_collision * r_c + weights.w_efficiency * r_e + weights.w_arrival * r_a
}
