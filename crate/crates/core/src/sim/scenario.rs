//! Deterministic construction of the cross-intersection geometry: four
//! single-lane arms and the twelve (origin, maneuver) routes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TaskId;
use crate::geom::{Aabb, Vec2};
use crate::kinematics::LaneRef;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("arm length {arm_length} must exceed the conflict-zone half width {zone_half}")]
    ArmTooShort { arm_length: f64, zone_half: f64 },
    #[error("lane width {lane_width} too narrow; need at least {min} for vehicle width and turn radii")]
    LaneTooNarrow { lane_width: f64, min: f64 },
    #[error("bad dimension: {0}")]
    BadDimension(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Approach length from spawn to the conflict-zone edge (m).
    pub arm_length: f64,
    /// Lane width (m); turn radii and the zone size derive from it.
    pub lane_width: f64,
    /// Exit length past the conflict zone to the route end (m).
    pub exit_length: f64,
    /// Arc sampling resolution (m).
    pub arc_ds: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { arm_length: 60.0, lane_width: 5.0, exit_length: 25.0, arc_ds: 0.5 }
    }
}

impl ScenarioConfig {
    pub fn lane_center_offset(&self) -> f64 {
        0.5 * self.lane_width
    }

    /// Inner (right-turn) radius: hugs the near corner.
    pub fn right_turn_radius(&self) -> f64 {
        self.lane_center_offset() + 7.0
    }

    /// Outer (left-turn) radius: sweeps across the junction. Kept at 4x the
    /// lane center offset so the left route stays longer than the straight
    /// one for equal arms.
    pub fn left_turn_radius(&self) -> f64 {
        4.0 * self.lane_center_offset()
    }

    /// Conflict-zone half extent; covers every turning arc.
    pub fn zone_half(&self) -> f64 {
        self.lane_center_offset() + self.right_turn_radius() + 0.5
    }
}

/// The four approach arms, in fixed right-of-way order (North highest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    North,
    East,
    South,
    West,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::North, Arm::East, Arm::South, Arm::West];

    /// Tie-break rank: N > E > S > W.
    pub fn priority_rank(self) -> u8 {
        match self {
            Arm::North => 3,
            Arm::East => 2,
            Arm::South => 1,
            Arm::West => 0,
        }
    }

    /// Number of 90-degree counterclockwise rotations mapping the South-arm
    /// template onto this arm.
    fn rotations(self) -> usize {
        match self {
            Arm::South => 0,
            Arm::East => 1,
            Arm::North => 2,
            Arm::West => 3,
        }
    }
}

/// One (origin arm, maneuver) path across the intersection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Route {
    pub origin: Arm,
    pub task: TaskId,
    pub lane: LaneRef,
    /// Arc length where the route enters the conflict zone.
    pub zone_entry_s: f64,
    /// Arc length where the route finally leaves the conflict zone.
    pub zone_exit_s: f64,
}

/// Static intersection geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntersectionScenario {
    pub config: ScenarioConfig,
    /// Indexed `arm.rotations() * 3 + task.index()` -- see [`route_index`].
    pub routes: Vec<Route>,
    pub conflict_zone: Aabb,
}

/// Stable route index for an (origin, task) pair.
pub fn route_index(origin: Arm, task: TaskId) -> usize {
    origin.rotations() * 3 + task.index()
}

impl IntersectionScenario {
    pub fn route(&self, origin: Arm, task: TaskId) -> &Route {
        &self.routes[route_index(origin, task)]
    }

    /// The ego always spawns on the South arm; its task picks the route.
    pub fn ego_route_index(&self, task: TaskId) -> usize {
        route_index(Arm::South, task)
    }
}

fn rotate_ccw(p: Vec2, times: usize) -> Vec2 {
    let mut q = p;
    for _ in 0..times % 4 {
        q = Vec2::new(-q.y, q.x);
    }
    q
}

/// Append `p` unless it duplicates the last point.
fn push_dedup(points: &mut Vec<Vec2>, p: Vec2) {
    if points.last().map_or(true, |last| last.dist(p) > 1e-9) {
        points.push(p);
    }
}

/// Quarter arc sampled at roughly `ds` spacing, endpoints included.
/// `theta0` -> `theta1` may run in either direction.
fn arc_points(center: Vec2, radius: f64, theta0: f64, theta1: f64, ds: f64) -> Vec<Vec2> {
    let span = theta1 - theta0;
    let n = ((radius * span.abs() / ds).ceil() as usize).max(8);
    (0..=n)
        .map(|i| {
            let theta = theta0 + span * (i as f64 / n as f64);
            center.add(Vec2::new(radius * theta.cos(), radius * theta.sin()))
        })
        .collect()
}

/// South-arm template for one maneuver, before rotation.
fn south_template(cfg: &ScenarioConfig, task: TaskId) -> Vec<Vec2> {
    let c = cfg.lane_center_offset();
    let zh = cfg.zone_half();
    let start = Vec2::new(c, -(zh + cfg.arm_length));
    let mut pts = vec![start];
    match task {
        TaskId::GoStraight => {
            push_dedup(&mut pts, Vec2::new(c, zh + cfg.exit_length));
        }
        TaskId::TurnRight => {
            let r = cfg.right_turn_radius();
            push_dedup(&mut pts, Vec2::new(c, -(c + r)));
            let center = Vec2::new(c + r, -(c + r));
            for p in arc_points(center, r, std::f64::consts::PI, std::f64::consts::FRAC_PI_2, cfg.arc_ds) {
                push_dedup(&mut pts, p);
            }
            push_dedup(&mut pts, Vec2::new(zh + cfg.exit_length, -c));
        }
        TaskId::TurnLeft => {
            let r = cfg.left_turn_radius();
            push_dedup(&mut pts, Vec2::new(c, -(r - c)));
            let center = Vec2::new(c - r, -(r - c));
            for p in arc_points(center, r, 0.0, std::f64::consts::FRAC_PI_2, cfg.arc_ds) {
                push_dedup(&mut pts, p);
            }
            push_dedup(&mut pts, Vec2::new(-(zh + cfg.exit_length), c));
        }
    }
    pts
}

/// First entry / last exit arc lengths of the zone along a lane, refined by
/// bisection on the crossing segments.
fn zone_span(lane: &LaneRef, zone: &Aabb) -> (f64, f64) {
    let len = lane.length();
    let probe = |s: f64| zone.contains(lane.point_at(s));
    let coarse = 0.05_f64;
    let mut entry = None;
    let mut exit = None;
    let mut s = 0.0;
    let mut prev_in = probe(0.0);
    while s < len {
        let next = (s + coarse).min(len);
        let now_in = probe(next);
        if now_in != prev_in {
            // bisect the transition
            let (mut lo, mut hi) = (s, next);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if probe(mid) == prev_in {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let crossing = 0.5 * (lo + hi);
            if prev_in {
                exit = Some(crossing);
            } else if entry.is_none() {
                entry = Some(crossing);
            }
            prev_in = now_in;
        }
        s = next;
    }
    (entry.unwrap_or(0.0), exit.unwrap_or(len))
}

/// Build the intersection. Deterministic: the same config produces a
/// bit-identical scenario.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<IntersectionScenario, ScenarioError> {
    for (name, v) in [
        ("arm_length", cfg.arm_length),
        ("lane_width", cfg.lane_width),
        ("exit_length", cfg.exit_length),
        ("arc_ds", cfg.arc_ds),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ScenarioError::BadDimension(format!("{name} = {v}")));
        }
    }
    // body width 2 m plus feasible turn radii for a 5 m wheelbase
    if cfg.lane_width < 4.0 {
        return Err(ScenarioError::LaneTooNarrow { lane_width: cfg.lane_width, min: 4.0 });
    }
    let zh = cfg.zone_half();
    if cfg.arm_length <= zh {
        return Err(ScenarioError::ArmTooShort { arm_length: cfg.arm_length, zone_half: zh });
    }

    let zone = Aabb { center: Vec2::new(0.0, 0.0), half_x: zh, half_y: zh };
    let mut routes = Vec::with_capacity(12);
    for arm in [Arm::South, Arm::East, Arm::North, Arm::West] {
        for task in TaskId::ALL {
            let pts = south_template(cfg, task)
                .into_iter()
                .map(|p| rotate_ccw(p, arm.rotations()))
                .collect();
            let lane = LaneRef::new(pts).expect("constructed lane is valid");
            let (zone_entry_s, zone_exit_s) = zone_span(&lane, &zone);
            routes.push(Route { origin: arm, task, lane, zone_entry_s, zone_exit_s });
        }
    }
    // reorder into route_index order (rotations * 3 + task)
    routes.sort_by_key(|r| route_index(r.origin, r.task));
    Ok(IntersectionScenario { config: *cfg, routes, conflict_zone: zone })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_has_twelve_routes_on_four_arms() {
        let sc = build_scenario(&ScenarioConfig::default()).unwrap();
        assert_eq!(sc.routes.len(), 12);
        for arm in Arm::ALL {
            for task in TaskId::ALL {
                let r = sc.route(arm, task);
                assert_eq!(r.origin, arm);
                assert_eq!(r.task, task);
            }
        }
    }

    #[test]
    fn spawn_lies_arm_length_from_zone_entry_along_every_route() {
        let cfg = ScenarioConfig { arm_length: 60.0, lane_width: 4.0, ..Default::default() };
        let sc = build_scenario(&cfg).unwrap();
        for r in &sc.routes {
            assert!(
                (r.zone_entry_s - 60.0).abs() < 1e-6,
                "{:?}/{:?}: entry at {}",
                r.origin,
                r.task,
                r.zone_entry_s
            );
            assert!(r.zone_exit_s > r.zone_entry_s);
            assert!(r.zone_exit_s < r.lane.length());
        }
    }

    #[test]
    fn route_lengths_order_left_straight_right() {
        let sc = build_scenario(&ScenarioConfig::default()).unwrap();
        for arm in Arm::ALL {
            let left = sc.route(arm, TaskId::TurnLeft).lane.length();
            let straight = sc.route(arm, TaskId::GoStraight).lane.length();
            let right = sc.route(arm, TaskId::TurnRight).lane.length();
            assert!(left > straight, "{arm:?}: left {left} vs straight {straight}");
            assert!(straight > right, "{arm:?}: straight {straight} vs right {right}");
        }
    }

    #[test]
    fn routes_have_no_heading_kinks() {
        let sc = build_scenario(&ScenarioConfig::default()).unwrap();
        for r in &sc.routes {
            let pts = r.lane.points();
            for w in pts.windows(3) {
                let h0 = w[1].sub(w[0]);
                let h1 = w[2].sub(w[1]);
                let a0 = h0.y.atan2(h0.x);
                let a1 = h1.y.atan2(h1.x);
                let diff = crate::geom::wrap_angle(a1 - a0).abs();
                assert!(diff < 0.2, "{:?}/{:?}: heading jump {diff}", r.origin, r.task);
            }
        }
    }

    #[test]
    fn construction_is_bit_deterministic() {
        let a = build_scenario(&ScenarioConfig::default()).unwrap();
        let b = build_scenario(&ScenarioConfig::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        let narrow = ScenarioConfig { lane_width: 3.0, ..Default::default() };
        assert!(matches!(build_scenario(&narrow), Err(ScenarioError::LaneTooNarrow { .. })));
        let short = ScenarioConfig { arm_length: 10.0, ..Default::default() };
        assert!(matches!(build_scenario(&short), Err(ScenarioError::ArmTooShort { .. })));
        let nan = ScenarioConfig { exit_length: f64::NAN, ..Default::default() };
        assert!(matches!(build_scenario(&nan), Err(ScenarioError::BadDimension(_))));
    }
}
