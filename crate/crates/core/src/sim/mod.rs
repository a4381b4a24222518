//! The unsignalized-intersection environment: geometry, IDM background
//! traffic with constant-speed conflict prediction, ego stepping,
//! observations, rewards and termination.

mod env;
mod idm;
mod observe;
mod reward;
mod scenario;

pub use env::{spawn_traffic, Cause, Env, SimError, SpawnResult, Spawned, StepOutcome, YieldDecision};
pub use idm::{idm_accel, HVProfile, IdmParams, IdmResult};
pub use observe::{observe, ObservationMatrix, N_OBS, OBS_FEATURES, POS_NORM, SPEED_NORM};
pub use reward::{compute_reward, RewardWeights};
pub use scenario::{
    build_scenario, route_index, Arm, IntersectionScenario, Route, ScenarioConfig, ScenarioError,
};

use serde::{Deserialize, Serialize};

/// The three ego maneuvers at the intersection. The ego route is always the
/// route matching (ego origin arm, task).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    TurnLeft,
    GoStraight,
    TurnRight,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::TurnLeft, TaskId::GoStraight, TaskId::TurnRight];

    pub fn index(self) -> usize {
        match self {
            TaskId::TurnLeft => 0,
            TaskId::GoStraight => 1,
            TaskId::TurnRight => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::TurnLeft => "left",
            TaskId::GoStraight => "straight",
            TaskId::TurnRight => "right",
        }
    }

    pub fn parse(s: &str) -> Option<TaskId> {
        match s {
            "left" => Some(TaskId::TurnLeft),
            "straight" => Some(TaskId::GoStraight),
            "right" => Some(TaskId::TurnRight),
            _ => None,
        }
    }

    /// Right-of-way rank of the maneuver: straight > right > left.
    pub fn priority_rank(self) -> u8 {
        match self {
            TaskId::GoStraight => 2,
            TaskId::TurnRight => 1,
            TaskId::TurnLeft => 0,
        }
    }
}

/// Background-traffic spawning parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    /// Vehicle count range (inclusive).
    pub n_min: usize,
    pub n_max: usize,
    /// Minimum pairwise spawn distance (m).
    pub min_gap: f64,
    /// Spawned vehicles keep at least this arc length before the zone (m).
    pub spawn_margin: f64,
    /// Initial speed range as fractions of the (jittered) desired speed.
    pub speed_frac_min: f64,
    pub speed_frac_max: f64,
    /// Car-following profile; per-spawn jitter comes from its style scale.
    pub profile: HVProfile,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            n_min: 1,
            n_max: 3,
            min_gap: 10.0,
            spawn_margin: 12.0,
            speed_frac_min: 0.5,
            speed_frac_max: 1.0,
            profile: HVProfile::default(),
        }
    }
}

impl TrafficConfig {
    /// Empty road: no background vehicles.
    pub fn empty() -> Self {
        Self { n_min: 0, n_max: 0, ..Self::default() }
    }
}

/// Full environment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub scenario: ScenarioConfig,
    pub traffic: TrafficConfig,
    pub weights: RewardWeights,
    /// Decision steps before timeout.
    pub horizon: usize,
    /// Seconds per decision step.
    pub decision_dt: f64,
    /// Physics integration step (s); must divide `decision_dt`.
    pub physics_dt: f64,
    /// Observation radius (m).
    pub perception_range: f64,
    /// Ego initial speed range (m/s).
    pub ego_speed_min: f64,
    pub ego_speed_max: f64,
    /// Constant-speed conflict prediction horizon and resolution (s).
    pub yield_horizon: f64,
    pub yield_dt: f64,
    pub vehicle: crate::kinematics::VehicleParams,
    pub gains: crate::kinematics::ControllerGains,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            traffic: TrafficConfig::default(),
            weights: RewardWeights::default(),
            horizon: 40,
            decision_dt: 1.0,
            physics_dt: 0.05,
            perception_range: 50.0,
            ego_speed_min: 4.0,
            ego_speed_max: 8.0,
            // long enough to cover entry-to-crossing at low approach speeds
            yield_horizon: 8.0,
            yield_dt: 0.25,
            vehicle: crate::kinematics::VehicleParams::default(),
            gains: crate::kinematics::ControllerGains::default(),
        }
    }
}

impl EnvConfig {
    pub fn substeps(&self) -> usize {
        (self.decision_dt / self.physics_dt).round() as usize
    }

    /// Normalizer that keeps the summed efficiency reward of a full episode
    /// in [0, 1].
    pub fn episode_norm(&self) -> f64 {
        self.horizon as f64 * self.decision_dt
    }
}
