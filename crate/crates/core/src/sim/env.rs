//! Episode state machine: traffic spawning, per-substep vehicle control,
//! collision detection and termination.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::idm::{idm_accel, IdmParams};
use super::observe::{observe, ObservationMatrix};
use super::reward::compute_reward;
use super::scenario::{IntersectionScenario, Route};
use super::{EnvConfig, TaskId, TrafficConfig};
use crate::geom::{obb_overlap, Obb, Vec2};
use crate::kinematics::{
    bicycle_step, lateral_control, meta_action_to_accel, KinematicsError, MetaAction, VehicleState,
};
use crate::seeding::derive_seed;
use crate::trace::{EpisodeTrace, TraceRecord, TraceVehicleRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("episode already terminated")]
    EpisodeOver,
    #[error("environment has no ego vehicle")]
    NoEgo,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Episode termination cause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Running,
    Arrived,
    Collided,
    TimedOut,
}

/// Result of one decision step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: ObservationMatrix,
    pub reward: f64,
    pub terminated: bool,
    pub cause: Cause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YieldDecision {
    Proceed,
    Yield,
}

/// One spawned background vehicle.
#[derive(Debug, Clone)]
pub struct Spawned {
    pub state: VehicleState,
    pub idm: IdmParams,
    pub route: usize,
}

#[derive(Debug, Clone)]
pub struct SpawnResult {
    pub vehicles: Vec<Spawned>,
    /// Vehicles that could not be placed with the required gaps.
    pub shortfall: usize,
}

/// Sample background traffic. Fully determined by `seed`; `exclude_route`
/// removes the ego route from the candidate set and `keep_clear` points
/// (e.g. the ego spawn) also enforce the minimum gap.
pub fn spawn_traffic(
    scenario: &IntersectionScenario,
    seed: u64,
    traffic: &TrafficConfig,
    exclude_route: Option<usize>,
    keep_clear: &[Vec2],
) -> SpawnResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = if traffic.n_max >= traffic.n_min {
        rng.gen_range(traffic.n_min..=traffic.n_max)
    } else {
        traffic.n_min
    };
    let candidates: Vec<usize> =
        (0..scenario.routes.len()).filter(|r| Some(*r) != exclude_route).collect();
    let arm_length = scenario.config.arm_length;
    let spawn_span = (arm_length - traffic.spawn_margin).max(0.0);

    let mut placed: Vec<Spawned> = Vec::new();
    let mut shortfall = 0;
    for _ in 0..n {
        let mut ok = false;
        for _attempt in 0..40 {
            let route_id = candidates[rng.gen_range(0..candidates.len())];
            let s = rng.gen_range(0.0..=spawn_span);
            let route = &scenario.routes[route_id];
            let pos = route.lane.point_at(s);
            let clear = keep_clear.iter().all(|p| p.dist(pos) >= traffic.min_gap)
                && placed.iter().all(|v| v.state.pos().dist(pos) >= traffic.min_gap);
            if !clear {
                continue;
            }
            let idm = traffic.profile.jittered(&mut rng);
            let frac = rng.gen_range(traffic.speed_frac_min..=traffic.speed_frac_max);
            // cap so the driver can still stop comfortably before the zone
            let dist_to_zone = (route.zone_entry_s - s).max(0.0);
            let v_cap = (2.0 * idm.b_comf * dist_to_zone).sqrt();
            let v = (frac * idm.v0).min(v_cap);
            let psi = route.lane.heading_at(s);
            placed.push(Spawned {
                state: VehicleState { x: pos.x, y: pos.y, v, psi, route_id, s_route: s },
                idm,
                route: route_id,
            });
            ok = true;
            break;
        }
        if !ok {
            shortfall += 1;
        }
    }
    SpawnResult { vehicles: placed, shortfall }
}

#[derive(Debug, Clone)]
struct Vehicle {
    state: VehicleState,
    /// `None` for the policy-controlled ego.
    idm: Option<IdmParams>,
    yielding: bool,
    crashed: bool,
    active: bool,
}

/// One episode of the intersection POMDP. An instance is exclusively owned
/// by its caller; run many instances for parallelism.
pub struct Env {
    scenario: Arc<IntersectionScenario>,
    cfg: EnvConfig,
    task: TaskId,
    vehicles: Vec<Vehicle>,
    ego: Option<usize>,
    steps: usize,
    time: f64,
    cause: Cause,
    spawn_shortfall: usize,
    trace: Option<EpisodeTrace>,
    seed: u64,
}

impl Env {
    /// Fresh episode with the ego on the South arm and seeded traffic.
    pub fn new(scenario: Arc<IntersectionScenario>, cfg: EnvConfig, task: TaskId, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "episode", 0));
        let ego_route = scenario.ego_route_index(task);
        let route = &scenario.routes[ego_route];
        let pos = route.lane.point_at(0.0);
        let psi = route.lane.heading_at(0.0);
        let v = rng.gen_range(cfg.ego_speed_min..=cfg.ego_speed_max);
        let ego_state = VehicleState { x: pos.x, y: pos.y, v, psi, route_id: ego_route, s_route: 0.0 };

        let spawn = spawn_traffic(
            &scenario,
            derive_seed(seed, "traffic", 0),
            &cfg.traffic,
            Some(ego_route),
            &[pos],
        );
        let mut vehicles =
            vec![Vehicle { state: ego_state, idm: None, yielding: false, crashed: false, active: true }];
        for s in spawn.vehicles {
            vehicles.push(Vehicle {
                state: s.state,
                idm: Some(s.idm),
                yielding: false,
                crashed: false,
                active: true,
            });
        }
        Self {
            scenario,
            cfg,
            task,
            vehicles,
            ego: Some(0),
            steps: 0,
            time: 0.0,
            cause: Cause::Running,
            spawn_shortfall: spawn.shortfall,
            trace: None,
            seed,
        }
    }

    /// Background-traffic-only episode (used by safety checks).
    pub fn new_hv_only(scenario: Arc<IntersectionScenario>, cfg: EnvConfig, seed: u64) -> Self {
        let spawn = spawn_traffic(&scenario, derive_seed(seed, "traffic", 0), &cfg.traffic, None, &[]);
        let vehicles = spawn
            .vehicles
            .into_iter()
            .map(|s| Vehicle {
                state: s.state,
                idm: Some(s.idm),
                yielding: false,
                crashed: false,
                active: true,
            })
            .collect();
        Self {
            scenario,
            cfg,
            task: TaskId::GoStraight,
            vehicles,
            ego: None,
            steps: 0,
            time: 0.0,
            cause: Cause::Running,
            spawn_shortfall: spawn.shortfall,
            trace: None,
            seed,
        }
    }

    /// Scripted episode for tests and replays: explicit vehicle placement.
    pub fn with_vehicles(
        scenario: Arc<IntersectionScenario>,
        cfg: EnvConfig,
        task: TaskId,
        vehicles: Vec<(VehicleState, Option<IdmParams>)>,
        ego: Option<usize>,
    ) -> Self {
        let vehicles = vehicles
            .into_iter()
            .map(|(state, idm)| Vehicle { state, idm, yielding: false, crashed: false, active: true })
            .collect();
        Self {
            scenario,
            cfg,
            task,
            vehicles,
            ego,
            steps: 0,
            time: 0.0,
            cause: Cause::Running,
            spawn_shortfall: 0,
            trace: None,
            seed: 0,
        }
    }

    pub fn scenario(&self) -> &IntersectionScenario {
        &self.scenario
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn cause(&self) -> Cause {
        self.cause
    }

    pub fn terminated(&self) -> bool {
        self.cause != Cause::Running
    }

    pub fn decision_steps(&self) -> usize {
        self.steps
    }

    pub fn spawn_shortfall(&self) -> usize {
        self.spawn_shortfall
    }

    pub fn ego_state(&self) -> Option<&VehicleState> {
        self.ego.map(|i| &self.vehicles[i].state)
    }

    /// Live vehicle states (ego first when present).
    pub fn active_states(&self) -> Vec<VehicleState> {
        self.vehicles.iter().filter(|v| v.active).map(|v| v.state).collect()
    }

    /// Record every physics substep into an episode trace, starting with the
    /// initial snapshot.
    pub fn enable_trace(&mut self) {
        let mut trace = EpisodeTrace::new(self.seed, self.task);
        trace.records = self.snapshot_records(None, None);
        self.trace = Some(trace);
    }

    fn snapshot_records(&self, action: Option<usize>, reward: Option<f64>) -> Vec<TraceRecord> {
        vec![TraceRecord {
            time: self.time,
            step: self.steps,
            action,
            reward,
            terminated: self.terminated(),
            cause: self.cause,
            vehicles: self
                .vehicles
                .iter()
                .enumerate()
                .filter(|(_, v)| v.active)
                .map(|(i, v)| TraceVehicleRecord {
                    id: i,
                    ego: Some(i) == self.ego,
                    route: v.state.route_id,
                    x: v.state.x,
                    y: v.state.y,
                    v: v.state.v,
                    psi: v.state.psi,
                })
                .collect(),
        }]
    }

    fn record_trace(&self, into: &mut Option<EpisodeTrace>, action: Option<usize>, reward: Option<f64>) {
        if let Some(trace) = into {
            trace.records.extend(self.snapshot_records(action, reward));
        }
    }

    /// Consume the recorded trace, if tracing was enabled.
    pub fn take_trace(&mut self) -> Option<EpisodeTrace> {
        self.trace.take()
    }

    pub fn observe_ego(&self) -> Result<ObservationMatrix, SimError> {
        let ego = self.ego.ok_or(SimError::NoEgo)?;
        let mut states = vec![self.vehicles[ego].state];
        states.extend(
            self.vehicles
                .iter()
                .enumerate()
                .filter(|(i, v)| *i != ego && v.active)
                .map(|(_, v)| v.state),
        );
        Ok(observe(&states, 0, self.cfg.perception_range))
    }

    fn route_of(&self, i: usize) -> &Route {
        &self.scenario.routes[self.vehicles[i].state.route_id]
    }

    fn obb_of(&self, state: &VehicleState) -> Obb {
        Obb::new(state.pos(), state.psi, self.cfg.vehicle.length, self.cfg.vehicle.width)
    }

    fn in_zone(&self, p: Vec2) -> bool {
        self.scenario.conflict_zone.contains(p)
    }

    /// Bumper gap and closing speed to the nearest vehicle bodily on `i`'s
    /// path ahead. `(inf, 0)` when the path is clear.
    fn leader_gap(&self, i: usize) -> (f64, f64) {
        let me = &self.vehicles[i];
        let route = self.route_of(i);
        let lat_threshold = self.cfg.vehicle.width + 0.5;
        let mut best = (f64::INFINITY, 0.0);
        for (j, other) in self.vehicles.iter().enumerate() {
            if j == i || !other.active {
                continue;
            }
            let proj = route.lane.project(other.state.pos());
            if proj.lateral.abs() > lat_threshold || proj.s <= me.state.s_route {
                continue;
            }
            let gap = proj.s - me.state.s_route - self.cfg.vehicle.length;
            if gap < best.0 {
                let along = route.lane.heading_at(proj.s);
                let closing = me.state.v - other.state.v * (other.state.psi - along).cos();
                best = (gap, closing);
            }
        }
        best
    }

    /// Pose of vehicle `i` after `t` seconds of constant-speed motion along
    /// its route. `None` once it would run off the route end.
    fn predict_pose(&self, i: usize, t: f64) -> Option<Obb> {
        let v = &self.vehicles[i];
        let s = v.state.s_route + v.state.v * t;
        let route = self.route_of(i);
        if s >= route.lane.length() {
            return None;
        }
        let pos = route.lane.point_at(s);
        let psi = route.lane.heading_at(s);
        Some(Obb::new(pos, psi, self.cfg.vehicle.length, self.cfg.vehicle.width))
    }

    /// Entry time used in right-of-way tie-breaks.
    fn predicted_entry_time(&self, i: usize) -> f64 {
        let v = &self.vehicles[i];
        let route = self.route_of(i);
        (route.zone_entry_s - v.state.s_route).max(0.0) / v.state.v.max(0.1)
    }

    /// True when `a`'s claim on the conflict zone beats `b`'s.
    fn beats(&self, a: usize, b: usize) -> bool {
        let task_a = self.route_of(a).task.priority_rank();
        let task_b = self.route_of(b).task.priority_rank();
        if task_a != task_b {
            return task_a > task_b;
        }
        let ta = self.predicted_entry_time(a);
        let tb = self.predicted_entry_time(b);
        if (ta - tb).abs() > 1e-9 {
            return ta < tb;
        }
        let arm_a = self.route_of(a).origin.priority_rank();
        let arm_b = self.route_of(b).origin.priority_rank();
        if arm_a != arm_b {
            return arm_a > arm_b;
        }
        a < b
    }

    /// Constant-speed conflict prediction. The vehicle proceeds if it is
    /// already inside or past the zone; otherwise it yields to any
    /// conflicting vehicle that is committed (inside the zone) or holds
    /// right of way.
    pub fn hv_yield_decision(&self, i: usize) -> YieldDecision {
        let me = &self.vehicles[i];
        let route = self.route_of(i);
        if me.state.s_route >= route.zone_exit_s {
            return YieldDecision::Proceed;
        }
        if self.in_zone(me.state.pos()) {
            return YieldDecision::Proceed;
        }
        let steps = (self.cfg.yield_horizon / self.cfg.yield_dt).ceil() as usize;
        for (j, other) in self.vehicles.iter().enumerate() {
            if j == i || !other.active {
                continue;
            }
            let mut conflict = false;
            for k in 1..=steps {
                let t = k as f64 * self.cfg.yield_dt;
                let (Some(mine), Some(theirs)) = (self.predict_pose(i, t), self.predict_pose(j, t))
                else {
                    break;
                };
                if obb_overlap(&mine, &theirs)
                    && (self.in_zone(mine.center) || self.in_zone(theirs.center))
                {
                    conflict = true;
                    break;
                }
            }
            if conflict {
                if self.in_zone(other.state.pos()) {
                    return YieldDecision::Yield;
                }
                if self.beats(j, i) {
                    return YieldDecision::Yield;
                }
            }
        }
        YieldDecision::Proceed
    }

    /// Comfortable speed for the curvature near the vehicle: scans a little
    /// behind (so speed is held until the tail clears a turn) and well ahead.
    fn curve_speed_cap(&self, i: usize) -> f64 {
        const LATERAL_ACCEL_COMFORT: f64 = 1.5;
        let me = &self.vehicles[i];
        let lane = &self.route_of(i).lane;
        let mut kappa_max: f64 = 0.0;
        let mut offset = -6.0;
        while offset <= 18.0 {
            kappa_max = kappa_max.max(lane.curvature_at(me.state.s_route + offset).abs());
            offset += 3.0;
        }
        if kappa_max < 1e-6 {
            f64::INFINITY
        } else {
            (LATERAL_ACCEL_COMFORT / kappa_max).sqrt().max(2.5)
        }
    }

    /// Distance along `i`'s route to the first position where its body would
    /// overlap a slow or stopped vehicle, by sweeping its footprint forward.
    /// Speed-independent, so creeping vehicles cannot inch into contact.
    fn blocked_path_gap(&self, i: usize) -> Option<f64> {
        const SWEEP_RANGE: f64 = 22.0;
        const SWEEP_DS: f64 = 0.5;
        const SLOW: f64 = 2.0;
        let me = &self.vehicles[i];
        let lane = &self.route_of(i).lane;
        let obstacles: Vec<Obb> = self
            .vehicles
            .iter()
            .enumerate()
            .filter(|(j, o)| *j != i && o.active && o.state.v < SLOW)
            .map(|(_, o)| {
                let mut b = self.obb_of(&o.state);
                b.half_len += 0.5;
                b.half_wid += 0.3;
                b
            })
            .collect();
        if obstacles.is_empty() {
            return None;
        }
        let mut d = SWEEP_DS;
        while d <= SWEEP_RANGE {
            let s = me.state.s_route + d;
            if s >= lane.length() {
                break;
            }
            let mine = Obb::new(
                lane.point_at(s),
                lane.heading_at(s),
                self.cfg.vehicle.length,
                self.cfg.vehicle.width + 0.6,
            );
            if obstacles.iter().any(|o| obb_overlap(&mine, o)) {
                return Some(d);
            }
            d += SWEEP_DS;
        }
        None
    }

    /// Any predicted body overlap with another vehicle within `horizon`
    /// seconds at constant speeds (last-resort avoidance, priority-blind).
    /// Footprints are inflated so braking completes with real clearance
    /// instead of stopping at first contact.
    fn imminent_overlap(&self, i: usize, horizon: f64) -> bool {
        let steps = (horizon / self.cfg.yield_dt).ceil() as usize;
        let inflate = |mut o: Obb| {
            o.half_len += 1.0;
            o.half_wid += 0.5;
            o
        };
        for (j, other) in self.vehicles.iter().enumerate() {
            if j == i || !other.active {
                continue;
            }
            for k in 1..=steps {
                let t = k as f64 * self.cfg.yield_dt;
                let (Some(mine), Some(theirs)) = (self.predict_pose(i, t), self.predict_pose(j, t))
                else {
                    break;
                };
                if obb_overlap(&inflate(mine), &inflate(theirs)) {
                    return true;
                }
            }
        }
        false
    }

    /// HV longitudinal command: car-following capped by curve comfort,
    /// blended with a virtual stop wall at the zone entry while yielding and
    /// an emergency brake on imminent predicted overlap.
    fn hv_accel(&self, i: usize) -> f64 {
        let me = &self.vehicles[i];
        let idm = me.idm.as_ref().expect("hv_accel called on ego");
        let (gap, closing) = self.leader_gap(i);
        let capped = IdmParams { v0: idm.v0.min(self.curve_speed_cap(i)), ..*idm };
        let mut accel = idm_accel(me.state.v, gap, closing, &capped).accel;
        if let Some(block) = self.blocked_path_gap(i) {
            let hold = idm_accel(me.state.v, (block - 1.0).max(1e-3), me.state.v, &capped).accel;
            accel = accel.min(hold);
        }
        if me.yielding {
            // hold the nose a few meters short of the zone so turning
            // traffic swinging wide on exit cannot clip a waiting vehicle
            let route = self.route_of(i);
            let wall_gap =
                route.zone_entry_s - me.state.s_route - 0.5 * self.cfg.vehicle.length - 3.0;
            let hold = idm_accel(me.state.v, wall_gap.max(1e-3), me.state.v, &capped).accel;
            accel = accel.min(hold);
        }
        if self.imminent_overlap(i, 1.5) {
            accel = accel.min(-idm.b_hard());
        }
        accel
    }

    fn substep(&mut self, ego_accel: Option<f64>) -> Result<SubstepEvents, SimError> {
        // refresh yield decisions from the current poses
        for i in 0..self.vehicles.len() {
            if self.vehicles[i].active && !self.vehicles[i].crashed && self.vehicles[i].idm.is_some() {
                self.vehicles[i].yielding = self.hv_yield_decision(i) == YieldDecision::Yield;
            }
        }
        // controls from the pre-step state, then simultaneous integration
        let mut controls: Vec<Option<(f64, f64)>> = vec![None; self.vehicles.len()];
        for i in 0..self.vehicles.len() {
            let v = &self.vehicles[i];
            if !v.active || v.crashed {
                continue;
            }
            let steer = lateral_control(
                &v.state,
                &self.route_of(i).lane,
                &self.cfg.gains,
                &self.cfg.vehicle,
            );
            let accel = match v.idm {
                None => ego_accel.ok_or(SimError::NoEgo)?,
                Some(_) => self.hv_accel(i),
            };
            controls[i] = Some((accel, steer));
        }
        for i in 0..self.vehicles.len() {
            let Some((accel, steer)) = controls[i] else { continue };
            let route_len = self.route_of(i).lane.length();
            let lane = &self.scenario.routes[self.vehicles[i].state.route_id].lane;
            let mut next = bicycle_step(
                &self.vehicles[i].state,
                accel,
                steer,
                self.cfg.physics_dt,
                &self.cfg.vehicle,
            )?;
            let proj = lane.project(next.pos());
            next.s_route = proj.s.max(self.vehicles[i].state.s_route);
            self.vehicles[i].state = next;
            // background vehicles despawn at the route end; the ego arriving
            // is handled by the caller
            if self.vehicles[i].idm.is_some() && next.s_route >= route_len - 1e-6 {
                self.vehicles[i].active = false;
            }
        }
        self.time += self.cfg.physics_dt;

        // collision sweep
        let mut events = SubstepEvents::default();
        let n = self.vehicles.len();
        for a in 0..n {
            if !self.vehicles[a].active {
                continue;
            }
            for b in a + 1..n {
                if !self.vehicles[b].active {
                    continue;
                }
                let oa = self.obb_of(&self.vehicles[a].state);
                let ob = self.obb_of(&self.vehicles[b].state);
                if obb_overlap(&oa, &ob) {
                    events.any_collision = true;
                    if Some(a) == self.ego || Some(b) == self.ego {
                        events.ego_collided = true;
                    } else {
                        for idx in [a, b] {
                            self.vehicles[idx].crashed = true;
                            self.vehicles[idx].state.v = 0.0;
                        }
                    }
                }
            }
        }
        if let Some(e) = self.ego {
            let route_len = self.route_of(e).lane.length();
            if self.vehicles[e].state.s_route >= route_len - 1e-6 {
                events.ego_arrived = true;
            }
        }
        Ok(events)
    }

    /// Advance one decision period under the given ego meta-action.
    pub fn step(&mut self, action: MetaAction) -> Result<StepOutcome, SimError> {
        let ego = self.ego.ok_or(SimError::NoEgo)?;
        if self.terminated() {
            return Err(SimError::EpisodeOver);
        }
        let prev = self.vehicles[ego].state;
        let accel = meta_action_to_accel(action);
        let mut trace = self.trace.take();
        let mut cause = Cause::Running;
        for _ in 0..self.cfg.substeps() {
            let events = self.substep(Some(accel))?;
            self.record_trace(&mut trace, Some(action.index()), None);
            if events.ego_collided {
                cause = Cause::Collided;
                break;
            }
            if events.ego_arrived {
                cause = Cause::Arrived;
                break;
            }
        }
        self.steps += 1;
        if cause == Cause::Running && self.steps >= self.cfg.horizon {
            cause = Cause::TimedOut;
        }
        self.cause = cause;
        let now = self.vehicles[ego].state;
        let reward = compute_reward(
            &prev,
            &now,
            cause,
            &self.cfg.weights,
            self.cfg.vehicle.v_max,
            self.cfg.decision_dt,
            self.cfg.episode_norm(),
        );
        if let Some(t) = trace.as_mut() {
            if let Some(last) = t.records.last_mut() {
                last.reward = Some(reward);
                last.terminated = cause != Cause::Running;
                last.cause = cause;
            }
        }
        self.trace = trace;
        let obs = self.observe_ego()?;
        Ok(StepOutcome { obs, reward, terminated: cause != Cause::Running, cause })
    }

    /// Advance one decision period with background traffic only. Returns
    /// whether any collision occurred during the period.
    pub fn step_traffic_only(&mut self) -> Result<bool, SimError> {
        let mut any = false;
        for _ in 0..self.cfg.substeps() {
            any |= self.substep(None)?.any_collision;
        }
        self.steps += 1;
        Ok(any)
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct SubstepEvents {
    ego_collided: bool,
    ego_arrived: bool,
    any_collision: bool,
}
