//! Continuous vehicle motion: kinematic bicycle integration and the
//! proportional lateral/heading controller that turns a target lane into a
//! steering angle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Vec2};

/// Speed floor used in controller divisions; the control law is singular at
/// standstill.
pub const V_FLOOR: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("non-finite value in field `{field}`: {value}")]
    NonFinite { field: &'static str, value: f64 },
    #[error("dt must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("steering {steer} exceeds steer_max {steer_max}")]
    SteerOutOfRange { steer: f64, steer_max: f64 },
    #[error("lane centerline needs at least 2 points with distinct neighbors")]
    DegenerateLane,
}

/// Pose, speed and route progress of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Longitudinal position (m), world frame.
    pub x: f64,
    /// Lateral position (m), world frame.
    pub y: f64,
    /// Forward speed (m/s), never negative.
    pub v: f64,
    /// Heading (rad), wrapped to (-pi, pi].
    pub psi: f64,
    /// Identifier of the assigned route.
    pub route_id: usize,
    /// Arc-length progress along the route (m).
    pub s_route: f64,
}

impl VehicleState {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    fn check_finite(&self) -> Result<(), KinematicsError> {
        let fields = [
            ("x", self.x),
            ("y", self.y),
            ("v", self.v),
            ("psi", self.psi),
            ("s_route", self.s_route),
        ];
        for (field, value) in fields {
            if !value.is_finite() {
                return Err(KinematicsError::NonFinite { field, value });
            }
        }
        Ok(())
    }
}

/// Body and actuation limits of a vehicle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Body length (m).
    pub length: f64,
    /// Body width (m).
    pub width: f64,
    /// Wheelbase, the `l` of the bicycle model (m).
    pub wheelbase_l: f64,
    /// Speed cap (m/s).
    pub v_max: f64,
    /// Steering cap (rad).
    pub steer_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            length: 5.0,
            width: 2.0,
            wheelbase_l: 5.0,
            v_max: 10.0,
            steer_max: std::f64::consts::FRAC_PI_3,
        }
    }
}

/// Proportional gains of the lateral/heading controller.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ControllerGains {
    /// Lateral position gain (1/s).
    pub kp_lat: f64,
    /// Heading gain (1/s).
    pub kp_psi: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        // kp_psi compensates the yaw-rate attenuation of the
        // slip-angle/steering chain; see the closed-loop tracking test.
        Self {
            kp_lat: 1.0 / 3.0,
            kp_psi: 4.0,
        }
    }
}

/// High-level longitudinal decision of the ego policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetaAction {
    SlowDown,
    Cruising,
    SpeedUp,
}

impl MetaAction {
    pub const ALL: [MetaAction; 3] = [MetaAction::SlowDown, MetaAction::Cruising, MetaAction::SpeedUp];

    pub fn index(self) -> usize {
        match self {
            MetaAction::SlowDown => 0,
            MetaAction::Cruising => 1,
            MetaAction::SpeedUp => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<MetaAction> {
        MetaAction::ALL.get(i).copied()
    }
}

/// Map a meta-action onto a longitudinal acceleration command (m/s^2).
pub fn meta_action_to_accel(action: MetaAction) -> f64 {
    match action {
        MetaAction::SlowDown => -1.0,
        MetaAction::Cruising => 0.0,
        MetaAction::SpeedUp => 1.0,
    }
}

/// One explicit-Euler step of the kinematic bicycle model.
///
/// All four derivatives are evaluated at the input state and applied
/// simultaneously; speed is clamped to `[0, v_max]` and the heading is
/// rewrapped to (-pi, pi].
pub fn bicycle_step(
    state: &VehicleState,
    accel: f64,
    steer: f64,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, KinematicsError> {
    state.check_finite()?;
    if !accel.is_finite() {
        return Err(KinematicsError::NonFinite { field: "accel", value: accel });
    }
    if !steer.is_finite() {
        return Err(KinematicsError::NonFinite { field: "steer", value: steer });
    }
    if !(dt > 0.0) {
        return Err(KinematicsError::NonPositiveDt(dt));
    }
    if steer.abs() > params.steer_max + 1e-12 {
        return Err(KinematicsError::SteerOutOfRange { steer, steer_max: params.steer_max });
    }

    let beta = (0.5 * steer.tan()).atan();
    let dx = state.v * (state.psi + beta).cos();
    let dy = state.v * (state.psi + beta).sin();
    let dpsi = state.v / params.wheelbase_l * beta.sin();

    Ok(VehicleState {
        x: state.x + dx * dt,
        y: state.y + dy * dt,
        v: (state.v + accel * dt).clamp(0.0, params.v_max),
        psi: wrap_angle(state.psi + dpsi * dt),
        route_id: state.route_id,
        s_route: state.s_route,
    })
}

/// Result of projecting a point onto a lane centerline.
#[derive(Debug, Clone, Copy)]
pub struct LaneProjection {
    /// Arc length of the closest centerline point (m).
    pub s: f64,
    /// Signed lateral offset; positive to the left of the lane direction.
    pub lateral: f64,
}

/// A lane centerline as an ordered polyline with arc-length lookups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaneRef {
    points: Vec<Vec2>,
    cum_s: Vec<f64>,
}

impl LaneRef {
    pub fn new(points: Vec<Vec2>) -> Result<Self, KinematicsError> {
        if points.len() < 2 {
            return Err(KinematicsError::DegenerateLane);
        }
        let mut cum_s = Vec::with_capacity(points.len());
        cum_s.push(0.0);
        for w in points.windows(2) {
            let seg = w[1].dist(w[0]);
            if seg <= 1e-9 {
                return Err(KinematicsError::DegenerateLane);
            }
            cum_s.push(cum_s.last().unwrap() + seg);
        }
        Ok(Self { points, cum_s })
    }

    pub fn length(&self) -> f64 {
        *self.cum_s.last().unwrap()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn first_point(&self) -> Vec2 {
        self.points[0]
    }

    pub fn last_point(&self) -> Vec2 {
        *self.points.last().unwrap()
    }

    /// Index of the segment containing arc length `s` (clamped to range).
    fn segment_at(&self, s: f64) -> usize {
        let s = s.clamp(0.0, self.length());
        match self.cum_s.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        }
    }

    /// Point on the centerline at arc length `s` (clamped).
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let t = (s - self.cum_s[i]) / (self.cum_s[i + 1] - self.cum_s[i]);
        self.points[i].add(self.points[i + 1].sub(self.points[i]).scale(t))
    }

    /// Lane heading at arc length `s` (direction of the containing segment).
    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s);
        let d = self.points[i + 1].sub(self.points[i]);
        d.y.atan2(d.x)
    }

    /// Signed path curvature at arc length `s`, from the heading change over
    /// a short window (positive turns left).
    pub fn curvature_at(&self, s: f64) -> f64 {
        let h = 1.0_f64.min(0.25 * self.length());
        let lo = (s - h).max(0.0);
        let hi = (s + h).min(self.length());
        if hi - lo < 1e-9 {
            return 0.0;
        }
        wrap_angle(self.heading_at(hi) - self.heading_at(lo)) / (hi - lo)
    }

    /// Closest-point projection of `p` onto the centerline.
    ///
    /// Returns the arc length of the closest point and the signed lateral
    /// offset (left of the lane direction is positive).
    pub fn project(&self, p: Vec2) -> LaneProjection {
        let mut best_d2 = f64::INFINITY;
        let mut best = LaneProjection { s: 0.0, lateral: 0.0 };
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let b = self.points[i + 1];
            let ab = b.sub(a);
            let len2 = ab.dot(ab);
            let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
            let q = a.add(ab.scale(t));
            let d2 = p.sub(q).dot(p.sub(q));
            if d2 < best_d2 {
                best_d2 = d2;
                let seg_len = len2.sqrt();
                let lat = ab.scale(1.0 / seg_len).left_normal().dot(p.sub(q));
                best = LaneProjection { s: self.cum_s[i] + t * seg_len, lateral: lat };
            }
        }
        best
    }
}

/// Proportional lane-keeping controller: lateral offset -> heading command ->
/// yaw-rate command -> front-wheel angle, with all arcsine arguments clamped
/// to [-1, 1] and speeds floored at [`V_FLOOR`].
///
/// On curved lanes the feedback law alone has a steady-state error of several
/// meters with a 5 m wheelbase, so an Ackermann feedforward term computed
/// from the previewed path curvature is added before the steering clamp. The
/// term vanishes on straight lanes.
pub fn lateral_control(
    state: &VehicleState,
    lane: &LaneRef,
    gains: &ControllerGains,
    params: &VehicleParams,
) -> f64 {
    let proj = lane.project(state.pos());
    let psi_lane = lane.heading_at(proj.s);
    let v_eff = state.v.max(V_FLOOR);

    // Ackermann feedforward for the previewed curvature, plus the matching
    // slip compensation of the heading target: on an arc the body heading
    // that keeps the velocity tangent to the path is psi_lane - slip.
    let lookahead = (state.v * 0.4).clamp(1.0, 6.0);
    let kappa = lane.curvature_at(proj.s + lookahead);
    let slip_ff = (params.wheelbase_l * kappa).clamp(-0.95, 0.95).asin();
    let feedforward = (2.0 * slip_ff.tan()).atan();

    let v_lat_cmd = -gains.kp_lat * proj.lateral;
    let dpsi_cmd = (v_lat_cmd / v_eff).clamp(-1.0, 1.0).asin();
    let psi_target = psi_lane - slip_ff + dpsi_cmd;
    let yaw_rate_cmd = gains.kp_psi * wrap_angle(psi_target - state.psi);
    let feedback = (0.5 * params.wheelbase_l * yaw_rate_cmd / v_eff)
        .clamp(-1.0, 1.0)
        .asin();

    (feedback + feedforward).clamp(-params.steer_max, params.steer_max)
}
