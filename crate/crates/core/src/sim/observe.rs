//! Ego-centric perception snapshot: a fixed-row matrix of normalized
//! per-vehicle feature vectors.

use serde::{Deserialize, Serialize};

use crate::kinematics::VehicleState;

/// Fixed observation row count (ego + nearest others).
pub const N_OBS: usize = 8;
/// Features per row: x, y, vx, vy.
pub const OBS_FEATURES: usize = 4;
/// Position normalizer (m).
pub const POS_NORM: f64 = 100.0;
/// Speed normalizer (m/s).
pub const SPEED_NORM: f64 = 10.0;

/// `N_OBS x OBS_FEATURES` matrix in absolute world coordinates, normalized
/// to [-1, 1]. Row 0 is the ego; rows 1.. hold the nearest observable
/// vehicles in increasing distance; absent rows are zero with
/// `presence = false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMatrix {
    pub rows: [[f64; OBS_FEATURES]; N_OBS],
    pub presence: [bool; N_OBS],
}

impl ObservationMatrix {
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub const fn flat_len() -> usize {
        N_OBS * OBS_FEATURES
    }
}

fn feature_row(state: &VehicleState) -> [f64; OBS_FEATURES] {
    [
        (state.x / POS_NORM).clamp(-1.0, 1.0),
        (state.y / POS_NORM).clamp(-1.0, 1.0),
        (state.v * state.psi.cos() / SPEED_NORM).clamp(-1.0, 1.0),
        (state.v * state.psi.sin() / SPEED_NORM).clamp(-1.0, 1.0),
    ]
}

/// Build the observation for `ego_index` over the live vehicle states.
/// Vehicles beyond `perception_range` are excluded; at most `N_OBS - 1`
/// others appear, nearest first (ties broken by slot order).
pub fn observe(states: &[VehicleState], ego_index: usize, perception_range: f64) -> ObservationMatrix {
    let ego = &states[ego_index];
    let mut rows = [[0.0; OBS_FEATURES]; N_OBS];
    let mut presence = [false; N_OBS];
    rows[0] = feature_row(ego);
    presence[0] = true;

    let mut others: Vec<(f64, usize)> = states
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ego_index)
        .map(|(i, s)| (s.pos().dist(ego.pos()), i))
        .filter(|(d, _)| *d <= perception_range)
        .collect();
    others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    for (slot, (_, idx)) in others.into_iter().take(N_OBS - 1).enumerate() {
        rows[slot + 1] = feature_row(&states[idx]);
        presence[slot + 1] = true;
    }
    ObservationMatrix { rows, presence }
}
