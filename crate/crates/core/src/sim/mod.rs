//! Deterministic, seedable 2D urban traffic simulator.
//!
//! One [`World`] is one episode: an ego vehicle with kinematic bicycle
//! dynamics, lane-locked background vehicles with a rule-based car-following
//! policy, scripted crossing pedestrians, signals, stop lines, and per-step
//! infraction events. All randomness is drawn at spawn time from a seeded
//! generator, so identical `(config, seed)` plus an identical ego command
//! sequence reproduce the episode bit for bit.

pub mod map;
pub mod trace;

use crate::geom::{wrap_angle, Obb, Polyline, Vec2};
use map::{CorridorId, LaneMap, MapKind, SignalState, StopControl};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EGO_WHEELBASE: f64 = 2.8;
pub const MAX_BRAKE: f64 = 8.0;
pub const MAX_ACCEL: f64 = 3.0;
pub const MAX_STEER: f64 = 0.5;
pub const VEHICLE_HALF_LEN: f64 = 2.4;
pub const VEHICLE_HALF_WID: f64 = 0.9;
pub const PED_HALF: f64 = 0.4;
const PED_WALK_SPEED: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Ego,
    Vehicle,
    Pedestrian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub kind: AgentKind,
    pub x: f64,
    pub y: f64,
    /// Normalized to (-pi, pi].
    pub yaw: f64,
    /// Always >= 0; agents never reverse.
    pub speed: f64,
    pub accel: f64,
    pub lane_id: u32,
    pub half_length: f64,
    pub half_width: f64,
}

impl AgentState {
    pub fn obb(&self) -> Obb {
        Obb {
            center: Vec2::new(self.x, self.y),
            yaw: self.yaw,
            half_len: self.half_length,
            half_wid: self.half_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    /// m/s^2, clamped to [-8, +3].
    pub accel_cmd: f64,
    /// rad, clamped to [-0.5, +0.5].
    pub steer: f64,
    /// Fraction of full braking authority; 1.0 = no cap.
    pub brake_cap: f64,
}

impl ControlCommand {
    pub fn coast() -> Self {
        Self { accel_cmd: 0.0, steer: 0.0, brake_cap: 1.0 }
    }

    pub fn clamped(self) -> Self {
        let cap = self.brake_cap.clamp(0.0, 1.0);
        let mut a = self.accel_cmd.clamp(-MAX_BRAKE, MAX_ACCEL);
        if a < 0.0 {
            a = a.max(-MAX_BRAKE * cap);
        }
        Self { accel_cmd: a, steer: self.steer.clamp(-MAX_STEER, MAX_STEER), brake_cap: cap }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    pub collision: bool,
    /// Set on the step the ego transitions from on-road to off-road.
    pub offroad: bool,
    /// Set on the step the ego crosses a red stop line (once per encounter).
    pub red_light_violation: bool,
    /// Set on the step the ego crosses a stop-sign line without having
    /// stopped (< 0.1 m/s) within the 5 m approach window.
    pub stop_sign_violation: bool,
    /// Realized deceleration at or beyond the hard-brake threshold.
    pub hard_brake: bool,
    /// (accel_t - accel_{t-1}) / dt, signed.
    pub jerk: f64,
    pub goal_reached: bool,
    /// Non-decreasing within an episode.
    pub route_progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub map: MapKind,
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
    /// Seconds per control step.
    pub dt: f64,
    pub timeout_steps: u64,
    /// Realized decel threshold for hard-brake events, m/s^2.
    pub hard_brake_thresh: f64,
    /// |jerk| threshold for high-jerk events, m/s^3.
    pub high_jerk_thresh: f64,
    /// Sampled route length range in meters.
    pub route_len_min: f64,
    pub route_len_max: f64,
    pub goal_radius: f64,
    /// Overrides every crosswalk's trigger distance when set (stress preset).
    pub ped_trigger_override: Option<f64>,
}

impl WorldConfig {
    pub fn default_for(map: MapKind) -> Self {
        Self {
            map,
            n_vehicles: 30,
            n_pedestrians: 8,
            dt: 0.1,
            timeout_steps: 2000,
            hard_brake_thresh: 4.0,
            high_jerk_thresh: 8.0,
            route_len_min: 150.0,
            route_len_max: 400.0,
            goal_radius: 3.0,
            ped_trigger_override: None,
        }
    }

    /// Dense-traffic preset on the signalized intersection: more vehicles,
    /// many pedestrians, late crossing triggers.
    pub fn stress() -> Self {
        Self {
            n_vehicles: 36,
            n_pedestrians: 16,
            ped_trigger_override: Some(12.0),
            ..Self::default_for(MapKind::Grid)
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::InvalidConfig("dt must be > 0".into()));
        }
        if self.route_len_min <= 0.0 || self.route_len_max < self.route_len_min {
            return Err(SimError::InvalidConfig("bad route length range".into()));
        }
        let m = LaneMap::build(self.map);
        for c in &m.corridors {
            if !(c.lane_width > 0.0 && c.speed_limit > 0.0) {
                return Err(SimError::InvalidConfig("non-positive lane width or speed limit".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("spawn infeasible: {0}")]
    SpawnInfeasible(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Collision,
    Timeout,
    Stuck,
}

/// Episode route: a chain of corridors plus start/goal arclengths, flattened
/// into a single polyline for progress tracking.
#[derive(Debug, Clone)]
pub struct Route {
    pub corridors: Vec<CorridorId>,
    pub start_s: f64,
    pub goal_s: f64,
    pub polyline: Polyline,
    pub goal: Vec2,
}

#[derive(Debug, Clone)]
struct BgVehicle {
    corridor: CorridorId,
    lane: usize,
    s: f64,
    v: f64,
    accel: f64,
    /// Actual lateral offset; blends toward the lane center so corridor hops
    /// onto narrower connectors stay continuous.
    lat: f64,
    /// Stop-sign satisfied on the current corridor.
    sign_done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PedPhase {
    Waiting,
    Crossing,
    Cooldown(f64),
}

#[derive(Debug, Clone)]
struct Ped {
    corridor: CorridorId,
    s: f64,
    /// Current signed lateral position in the corridor frame.
    lat: f64,
    /// +1 while walking left, -1 while walking right.
    dir: f64,
    phase: PedPhase,
    trigger_dist: f64,
}

#[derive(Debug, Clone)]
struct EgoState {
    x: f64,
    y: f64,
    yaw: f64,
    v: f64,
    /// Realized acceleration of the previous step.
    accel: f64,
}

/// Road-relative context for the ego, recomputed every step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgoRoadContext {
    pub corridor: CorridorId,
    pub lane: usize,
    pub n_lanes: usize,
    pub lane_width: f64,
    pub speed_limit: f64,
    /// Signed offset from the current lane center, positive left.
    pub lane_center_offset: f64,
    /// Heading of the current lane at the ego's arclength.
    pub lane_heading: f64,
    /// Signed curvature of the lane ahead (rad/m).
    pub lane_curvature: f64,
    /// Distance to the left drivable boundary (negative when beyond it).
    pub dist_left_boundary: f64,
    pub dist_right_boundary: f64,
    /// Distance along the route to the next stop line (large if none).
    pub dist_stop_line: f64,
    /// Effective state of that stop line. Stop signs read red until the
    /// mandated stop is performed, then green; no stop line reads green.
    pub signal_state: SignalState,
    /// True when the ego is required to stop at the line (red, or stopping
    /// distance for yellow, or unsatisfied stop sign).
    pub stop_required: bool,
    pub route_heading_error: f64,
    pub route_progress: f64,
    pub lane_exists_left: bool,
    pub lane_exists_right: bool,
    /// In-lane leader: (bumper gap m, leader speed m/s).
    pub leader: Option<(f64, f64)>,
    /// Bumper gaps (front, rear) in the adjacent lanes, +inf when empty.
    pub left_gaps: (f64, f64),
    pub right_gaps: (f64, f64),
    /// Distance to the nearest stopped object ahead in lane, +inf if none.
    pub static_obstacle_dist: f64,
    /// Distance to the nearest pedestrian currently crossing ahead, +inf if none.
    pub crossing_ped_dist: f64,
    /// Lower speed limit ahead on the route: (distance to it, limit).
    pub next_limit: Option<(f64, f64)>,
}

/// One simulator observation: agent list (ego first) plus ego road context.
#[derive(Debug, Clone)]
pub struct Observation {
    pub step: u64,
    pub time: f64,
    pub dt: f64,
    pub agents: Vec<AgentState>,
    pub ego_ctx: EgoRoadContext,
}

#[derive(Debug)]
pub struct World {
    pub config: WorldConfig,
    pub map: LaneMap,
    pub route: Route,
    step: u64,
    ego: EgoState,
    vehicles: Vec<BgVehicle>,
    peds: Vec<Ped>,
    progress: f64,
    offroad_now: bool,
    /// Stop lines already counted (or legally passed) this approach.
    crossed_lines: Vec<CorridorId>,
    /// Ego achieved a full stop in the sign window of this corridor.
    ego_sign_done: bool,
    low_speed_steps: u64,
    last_events: StepEvents,
    terminated: Option<Termination>,
}

/// Sample a start/goal pair and the connecting corridor chain.
fn sample_route(map: &LaneMap, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Route {
    let start_corr = map.spawnable[rng.random_range(0..map.spawnable.len())];
    let c0 = map.corridor(start_corr);
    let start_s = rng.random_range(10.0..(c0.centerline.length() - 30.0).max(11.0));
    let target_len = rng.random_range(cfg.route_len_min..cfg.route_len_max);

    let mut chain = vec![start_corr];
    let mut remaining = target_len - (c0.centerline.length() - start_s);
    let mut cur = start_corr;
    while remaining > 0.0 {
        let next = map.corridor(cur).successors[0];
        chain.push(next);
        remaining -= map.corridor(next).centerline.length();
        cur = next;
    }
    let goal_s = (map.corridor(cur).centerline.length() + remaining).clamp(5.0, map.corridor(cur).centerline.length() - 1.0);

    // flatten the chain into one polyline
    let mut pts: Vec<Vec2> = Vec::new();
    for (i, &cid) in chain.iter().enumerate() {
        let c = map.corridor(cid);
        let lo = if i == 0 { start_s } else { 0.0 };
        let hi = if i + 1 == chain.len() { goal_s } else { c.centerline.length() };
        let mut s = lo;
        while s < hi {
            pts.push(c.centerline.point_at(s));
            s += 2.0;
        }
        pts.push(c.centerline.point_at(hi));
    }
    pts.dedup_by(|a, b| a.dist(*b) < 1e-9);
    if pts.len() < 2 {
        pts.push(pts[0].add(Vec2::new(0.1, 0.0)));
    }
    let polyline = Polyline::new(pts);
    let goal = map.corridor(cur).pose_at(goal_s, 0.0).0;
    Route { corridors: chain, start_s, goal_s, polyline, goal }
}

/// Create an episode. Ego at the route start, `n_vehicles` + `n_pedestrians`
/// background agents placed collision-free, route fixed for the episode.
pub fn spawn_episode(config: &WorldConfig, seed: u64) -> Result<World, SimError> {
    config.validate()?;
    let map = LaneMap::build(config.map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let route = sample_route(&map, config, &mut rng);
    let start_corr = map.corridor(route.corridors[0]);
    let ego_lane = rng.random_range(0..start_corr.n_lanes);
    let (pos, heading) = start_corr.pose_at(route.start_s, start_corr.lane_center_offset(ego_lane));
    let ego = EgoState { x: pos.x, y: pos.y, yaw: heading, v: rng.random_range(2.0..5.0), accel: 0.0 };

    // background vehicles with same-lane spacing and clearance from the ego
    let mut vehicles: Vec<BgVehicle> = Vec::new();
    let mut attempts = 0usize;
    while vehicles.len() < config.n_vehicles {
        attempts += 1;
        if attempts > 200 * config.n_vehicles.max(1) {
            return Err(SimError::SpawnInfeasible(format!(
                "placed {}/{} vehicles on map {:?}",
                vehicles.len(),
                config.n_vehicles,
                config.map
            )));
        }
        let corridor = map.spawnable[rng.random_range(0..map.spawnable.len())];
        let c = map.corridor(corridor);
        let lane = rng.random_range(0..c.n_lanes);
        let s = rng.random_range(5.0..c.centerline.length() - 5.0);
        let clear = vehicles
            .iter()
            .all(|v| v.corridor != corridor || v.lane != lane || (v.s - s).abs() > 14.0);
        let ego_clear = corridor != route.corridors[0]
            || lane != ego_lane
            || (s - route.start_s).abs() > 20.0;
        if clear && ego_clear {
            let v0 = rng.random_range(2.0..c.speed_limit);
            let lat = c.lane_center_offset(lane);
            vehicles.push(BgVehicle { corridor, lane, s, v: v0, accel: 0.0, lat, sign_done: false });
        }
    }

    // pedestrians assigned round-robin to crosswalks
    let crosswalks: Vec<(CorridorId, f64, f64)> = map
        .corridors
        .iter()
        .enumerate()
        .flat_map(|(id, c)| c.crosswalks.iter().map(move |cw| (id, cw.s, cw.trigger_dist)))
        .collect();
    if crosswalks.is_empty() && config.n_pedestrians > 0 {
        return Err(SimError::SpawnInfeasible("map has no crosswalks for pedestrians".into()));
    }
    let mut peds = Vec::new();
    for i in 0..config.n_pedestrians {
        let (corridor, s, trig) = crosswalks[i % crosswalks.len()];
        let trig = config.ped_trigger_override.unwrap_or(trig);
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let half_w = map.corridor(corridor).drivable_half_width();
        let stagger = rng.random_range(0.0..12.0);
        peds.push(Ped {
            corridor,
            s: s + (i / crosswalks.len()) as f64 * 2.0,
            lat: side * (half_w + 1.2),
            dir: -side,
            phase: PedPhase::Cooldown(stagger),
            trigger_dist: trig,
        });
    }

    Ok(World {
        config: config.clone(),
        map,
        route,
        step: 0,
        ego,
        vehicles,
        peds,
        progress: 0.0,
        offroad_now: false,
        crossed_lines: Vec::new(),
        ego_sign_done: false,
        low_speed_steps: 0,
        last_events: StepEvents::default(),
        terminated: None,
    })
}

/// Rule controller shared by background vehicles: free-road speed tracking,
/// gap keeping behind a leader, and stop-point braking.
///
/// `leader` is (bumper gap m, leader speed m/s); `stop_dist` is the distance
/// to a mandatory stop point.
pub fn car_following_accel(
    dt: f64,
    v: f64,
    speed_limit: f64,
    leader: Option<(f64, f64)>,
    stop_dist: Option<f64>,
) -> f64 {
    let mut accel = (1.2 * (speed_limit - v)).clamp(-3.0, 2.5);

    if let Some((gap, v_lead)) = leader {
        let closing = v - v_lead;
        if gap < 2.0 + 0.25 * closing.max(0.0) && (v > 0.1 || closing > 0.0) {
            return -MAX_BRAKE;
        }
        // cushion: never drop below the minimum gap, widened with speed
        let desired = (1.5 * v * dt + 2.0).max(0.45 * v);
        if gap < desired {
            accel = accel.min((-8.0 * (desired - gap) / desired).min(-1.0));
        } else if closing > 0.0 {
            let req = closing * closing / (2.0 * (gap - desired).max(0.1));
            if req > 0.3 {
                accel = accel.min(-1.25 * req);
            }
        }
    }

    if let Some(d) = stop_dist {
        accel = accel.min(stop_point_accel(v, d));
    }

    accel.clamp(-MAX_BRAKE, MAX_ACCEL)
}

/// Braking command that brings a vehicle to rest before a point `d` meters
/// ahead; no-op (returns +inf-ish cap) while braking is not yet needed.
fn stop_point_accel(v: f64, d: f64) -> f64 {
    if d <= 0.4 {
        return if v > 0.05 { -MAX_BRAKE } else { -2.0 };
    }
    if v < 0.05 && d < 2.0 {
        return -2.0; // hold at rest near the line
    }
    let margin = (d - 0.6).max(0.05);
    let req = v * v / (2.0 * margin);
    if req > 0.8 || d < 6.0 {
        -(1.2 * req).clamp(0.8, MAX_BRAKE)
    } else {
        MAX_ACCEL // no constraint yet
    }
}

impl World {
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.dt
    }

    pub fn terminated(&self) -> Option<Termination> {
        self.terminated
    }

    pub fn last_events(&self) -> StepEvents {
        self.last_events
    }

    pub fn ego_pose(&self) -> (f64, f64, f64, f64) {
        (self.ego.x, self.ego.y, self.ego.yaw, self.ego.v)
    }

    fn signal_for(&self, control: StopControl, sign_done: bool) -> SignalState {
        match control {
            StopControl::Signal { group } => self.map.signals[group].state_at(self.time()),
            StopControl::StopSign => {
                if sign_done {
                    SignalState::Green
                } else {
                    SignalState::Red
                }
            }
        }
    }

    /// Commands for every background vehicle, in vehicle order.
    pub fn background_policy(&self) -> Vec<ControlCommand> {
        self.vehicles
            .iter()
            .enumerate()
            .map(|(i, bg)| {
                let accel = self.bg_accel(i, bg);
                ControlCommand { accel_cmd: accel, steer: 0.0, brake_cap: 1.0 }
            })
            .collect()
    }

    fn bg_accel(&self, idx: usize, bg: &BgVehicle) -> f64 {
        let c = self.map.corridor(bg.corridor);
        let leader = self.bg_leader(idx, bg);

        // stop line on the current corridor
        let mut stop_dist: Option<f64> = None;
        if let Some(line) = &c.stop_line {
            if line.s >= bg.s {
                let must_stop = match line.control {
                    StopControl::Signal { group } => {
                        match self.map.signals[group].state_at(self.time()) {
                            SignalState::Red => true,
                            SignalState::Yellow => {
                                // proceed on yellow only when stopping would
                                // take a near-panic brake
                                let d = (line.s - bg.s).max(0.1);
                                bg.v * bg.v / (2.0 * d) < 6.0
                            }
                            SignalState::Green => false,
                        }
                    }
                    StopControl::StopSign => !bg.sign_done,
                };
                if must_stop {
                    stop_dist = Some(line.s - bg.s);
                }
            } else if bg.s < line.s + 6.0 {
                // marginal line overrun: hold short of the box until green
                let held = match line.control {
                    StopControl::Signal { group } => {
                        self.map.signals[group].state_at(self.time()) == SignalState::Red
                    }
                    StopControl::StopSign => false,
                };
                if held {
                    stop_dist = Some(0.0);
                }
            }
        }

        // crossing pedestrians ahead on this corridor
        for ped in &self.peds {
            if ped.corridor == bg.corridor && ped.phase == PedPhase::Crossing {
                let d = ped.s - 2.5 - bg.s;
                if d > -2.0 && d < 60.0 {
                    stop_dist = Some(stop_dist.map_or(d.max(0.0), |s| s.min(d.max(0.0))));
                }
            }
        }

        // yield before a lane-dropping connector while a priority rival
        // (lower lane index, or the ego) is alongside
        let len = c.centerline.length();
        if bg.s > len - 35.0 {
            let merging = c
                .successors
                .first()
                .map_or(false, |&n| self.map.corridor(n).n_lanes < c.n_lanes);
            if merging {
                let mut must_yield = false;
                for (j, o) in self.vehicles.iter().enumerate() {
                    if j != idx
                        && o.corridor == bg.corridor
                        && o.lane < bg.lane
                        && o.s > bg.s - 8.0
                        && o.s < bg.s + 25.0
                    {
                        must_yield = true;
                    }
                }
                let (ec, es, elat) = self.map.locate(Vec2::new(self.ego.x, self.ego.y), self.ego.yaw);
                if ec == bg.corridor && es > bg.s - 8.0 && es < bg.s + 25.0 {
                    let own_lat = c.lane_center_offset(bg.lane);
                    if (elat - own_lat).abs() > c.lane_width * 0.6 {
                        must_yield = true;
                    }
                }
                if must_yield {
                    let d = (len - 8.0 - bg.s).max(0.0);
                    stop_dist = Some(stop_dist.map_or(d, |s| s.min(d)));
                }
            }
        }

        // short single-lane connectors carry one vehicle at a time: arc-length
        // gaps understate proximity across a tight bend. A rival from the
        // other lane already ahead in the entrance zone counts as occupancy.
        if bg.s > len - 20.0 {
            if let Some(&succ) = c.successors.first() {
                let sc = self.map.corridor(succ);
                if sc.n_lanes == 1 && sc.centerline.length() < 40.0 {
                    let mut occupied = self.vehicles.iter().enumerate().any(|(j, o)| {
                        j != idx
                            && (o.corridor == succ
                                || (o.corridor == bg.corridor
                                    && o.lane != bg.lane
                                    && o.s > bg.s
                                    && o.s > len - 12.0))
                    });
                    if !occupied {
                        let (ec, _, elat) =
                            self.map.locate(Vec2::new(self.ego.x, self.ego.y), self.ego.yaw);
                        occupied = ec == succ && elat.abs() < sc.drivable_half_width() + 1.0;
                    }
                    if occupied {
                        let d = (len - 6.0 - bg.s).max(0.0);
                        stop_dist = Some(stop_dist.map_or(d, |s| s.min(d)));
                    }
                }
            }
        }

        // decelerate toward a slower successor before reaching it
        let mut limit = c.speed_limit;
        if let Some(&succ) = c.successors.first() {
            let sl = self.map.corridor(succ).speed_limit;
            if sl < limit {
                let d_end = (len - bg.s).max(0.0);
                limit = limit.min((sl * sl + 2.0 * 2.5 * d_end).sqrt());
            }
        }

        car_following_accel(self.config.dt, bg.v, limit, leader, stop_dist)
    }

    /// Nearest in-lane object ahead of a background vehicle, including the
    /// ego when it occupies the lane; walks up to two corridors ahead so
    /// queues across connectors are seen in time.
    fn bg_leader(&self, idx: usize, bg: &BgVehicle) -> Option<(f64, f64)> {
        const LOOKAHEAD: f64 = 60.0;
        let mut best: Option<(f64, f64)> = None;
        let mut push = |ds: f64, v: f64| {
            let gap = ds - 2.0 * VEHICLE_HALF_LEN;
            if ds > 0.0 && best.map_or(true, |(g, _)| gap < g) {
                best = Some((gap, v));
            }
        };
        let (ec, es, elat) = self.map.locate(Vec2::new(self.ego.x, self.ego.y), self.ego.yaw);

        let mut cid = bg.corridor;
        let mut base = -bg.s;
        for hop in 0..3 {
            let c = self.map.corridor(cid);
            let lane = bg.lane.min(c.n_lanes - 1);
            for (j, o) in self.vehicles.iter().enumerate() {
                if j != idx && o.corridor == cid && o.lane.min(c.n_lanes - 1) == lane {
                    push(base + o.s, o.v);
                }
            }
            if ec == cid {
                let lane_lat = c.lane_center_offset(lane);
                if (elat - lane_lat).abs() < c.lane_width * 0.6 {
                    push(base + es, self.ego.v);
                }
            }
            base += c.centerline.length();
            if base > LOOKAHEAD || hop == 2 {
                break;
            }
            cid = c.successors[0];
        }
        best.filter(|&(gap, _)| gap < LOOKAHEAD)
    }

    fn update_peds(&mut self) {
        let time = self.time();
        // gather (corridor, s, v) of everything that can trigger a crossing
        let mut movers: Vec<(CorridorId, f64, f64)> =
            self.vehicles.iter().map(|b| (b.corridor, b.s, b.v)).collect();
        let (ec, es, _) = self.map.locate(Vec2::new(self.ego.x, self.ego.y), self.ego.yaw);
        movers.push((ec, es, self.ego.v));

        for ped in &mut self.peds {
            match ped.phase {
                PedPhase::Cooldown(until) => {
                    if time >= until {
                        ped.phase = PedPhase::Waiting;
                    }
                }
                PedPhase::Waiting => {
                    let triggered = movers.iter().any(|&(c, s, v)| {
                        c == ped.corridor && v > 0.5 && s < ped.s && ped.s - s < ped.trigger_dist
                    });
                    if triggered {
                        ped.phase = PedPhase::Crossing;
                    }
                }
                PedPhase::Crossing => {
                    let half_w = self.map.corridor(ped.corridor).drivable_half_width();
                    ped.lat += ped.dir * PED_WALK_SPEED * self.config.dt;
                    let bound = half_w + 1.2;
                    if ped.lat.abs() >= bound {
                        ped.lat = ped.lat.clamp(-bound, bound);
                        ped.dir = -ped.dir;
                        ped.phase = PedPhase::Cooldown(time + 20.0);
                    }
                }
            }
        }
    }

    /// Advance one control step. Ego follows the (clamped) command with a
    /// kinematic bicycle update; background agents follow their policies.
    pub fn step_sim(&mut self, ego_cmd: ControlCommand) -> (Vec<AgentState>, StepEvents) {
        debug_assert!(self.terminated.is_none(), "step_sim after termination");
        let dt = self.config.dt;
        let cmd = ego_cmd.clamped();

        // pedestrians first so vehicles react to fresh crossing state
        self.update_peds();

        // background vehicles
        let cmds = self.background_policy();
        for (bg, c) in self.vehicles.iter_mut().zip(cmds.iter()) {
            let v_new = (bg.v + c.accel_cmd * dt).max(0.0);
            bg.accel = (v_new - bg.v) / dt;
            bg.s += bg.v * dt;
            bg.v = v_new;

            let corridor = &self.map.corridors[bg.corridor];
            // slide toward the lane center of the current corridor
            let target = corridor.lane_center_offset(bg.lane.min(corridor.n_lanes - 1));
            let max_slide = 1.2 * dt;
            bg.lat += (target - bg.lat).clamp(-max_slide, max_slide);
            // stop-sign satisfaction inside the 5 m approach window
            if let Some(line) = &corridor.stop_line {
                if line.control == StopControl::StopSign
                    && bg.s > line.s - 5.0
                    && bg.s <= line.s
                    && bg.v < 0.1
                {
                    bg.sign_done = true;
                }
            }
            let len = corridor.centerline.length();
            if bg.s >= len {
                bg.s -= len;
                let succ = corridor.successors[0];
                bg.corridor = succ;
                let n = self.map.corridor(succ).n_lanes;
                bg.lane = bg.lane.min(n - 1);
                bg.sign_done = false;
            }
        }

        // ego kinematic bicycle: position with the pre-update speed
        let prev_accel = self.ego.accel;
        let prev_pose = Vec2::new(self.ego.x, self.ego.y);
        self.ego.x += self.ego.v * self.ego.yaw.cos() * dt;
        self.ego.y += self.ego.v * self.ego.yaw.sin() * dt;
        self.ego.yaw = wrap_angle(self.ego.yaw + self.ego.v / EGO_WHEELBASE * cmd.steer.tan() * dt);
        let v_new = (self.ego.v + cmd.accel_cmd * dt).max(0.0);
        let realized = (v_new - self.ego.v) / dt;
        self.ego.v = v_new;
        self.ego.accel = realized;
        self.step += 1;

        let events = self.detect_events(prev_pose, prev_accel, realized);
        self.last_events = events;

        if events.collision {
            self.terminated = Some(Termination::Collision);
        } else if events.goal_reached {
            self.terminated = Some(Termination::Goal);
        } else if self.step >= self.config.timeout_steps {
            self.terminated = Some(Termination::Timeout);
        } else if self.low_speed_steps as f64 * dt >= 30.0 {
            self.terminated = Some(Termination::Stuck);
        }

        (self.agent_states(), events)
    }

    /// Per-step infraction and progress events for the ego.
    fn detect_events(&mut self, prev_pose: Vec2, prev_accel: f64, realized_accel: f64) -> StepEvents {
        let dt = self.config.dt;
        let ego_pos = Vec2::new(self.ego.x, self.ego.y);
        let agents = self.agent_states();
        let ego_box = agents[0].obb();

        let collision = agents[1..].iter().any(|a| ego_box.overlaps(&a.obb()));

        // off-road: beyond the drivable width of every corridor
        let on_road = self.map.corridors.iter().any(|c| {
            let (_, lat) = c.centerline.project(ego_pos);
            lat.abs() <= c.drivable_half_width()
        });
        let offroad_edge = !on_road && !self.offroad_now;
        self.offroad_now = !on_road;

        // stop-line crossings on the previous/current corridor
        let (curr_c, curr_s, _) = self.map.locate(ego_pos, self.ego.yaw);
        let (prev_c, prev_s, _) = self.map.locate(prev_pose, self.ego.yaw);
        let mut red_violation = false;
        let mut sign_violation = false;
        let mut check_cross = |world: &mut Self, cid: CorridorId, s0: f64, s1: f64| {
            let c = &world.map.corridors[cid];
            let Some(line) = &c.stop_line else { return };
            if !(s0 < line.s && s1 >= line.s) || world.crossed_lines.contains(&cid) {
                return;
            }
            world.crossed_lines.push(cid);
            match line.control {
                StopControl::Signal { group } => {
                    if world.map.signals[group].state_at(world.time()) == SignalState::Red {
                        red_violation = true;
                    }
                }
                StopControl::StopSign => {
                    if !world.ego_sign_done {
                        sign_violation = true;
                    }
                }
            }
        };
        if prev_c == curr_c {
            check_cross(self, curr_c, prev_s, curr_s);
        } else {
            let prev_len = self.map.corridor(prev_c).centerline.length();
            check_cross(self, prev_c, prev_s, prev_len + 1.0);
            check_cross(self, curr_c, -1.0, curr_s);
        }
        // track stop-sign compliance inside the approach window
        {
            let c = self.map.corridor(curr_c);
            if let Some(line) = &c.stop_line {
                if line.control == StopControl::StopSign {
                    if curr_s > line.s - 5.0 && curr_s <= line.s && self.ego.v < 0.1 {
                        self.ego_sign_done = true;
                    }
                    if curr_s < line.s - 6.0 {
                        self.ego_sign_done = false;
                    }
                }
            }
            // new approach: clear the crossing memo once well before the line
            self.crossed_lines.retain(|&cid| {
                let c = &self.map.corridors[cid];
                let line_s = c.stop_line.as_ref().map(|l| l.s).unwrap_or(f64::MAX);
                !(cid == curr_c && curr_s < line_s - 6.0)
            });
        }

        // route progress is the monotone max of the route projection
        let (proj_s, _) = self.route.polyline.project(ego_pos);
        let frac = (proj_s / self.route.polyline.length()).clamp(0.0, 1.0);
        self.progress = self.progress.max(frac);
        let goal_reached = self.progress >= 0.995 || ego_pos.dist(self.route.goal) <= self.config.goal_radius;

        let jerk = (realized_accel - prev_accel) / dt;
        let hard_brake = realized_accel <= -self.config.hard_brake_thresh;

        // stuck bookkeeping: standing still without a legitimate reason (a
        // stop line ahead, or a queue: a stopped leader close in front)
        let ctx = self.ego_context();
        let waiting_at_line = ctx.stop_required && ctx.dist_stop_line < 60.0;
        let queued = ctx.leader.map_or(false, |(gap, v)| gap < 12.0 && v < 0.5);
        if self.ego.v < 0.1 && !waiting_at_line && !queued {
            self.low_speed_steps += 1;
        } else {
            self.low_speed_steps = 0;
        }

        StepEvents {
            collision,
            offroad: offroad_edge,
            red_light_violation: red_violation,
            stop_sign_violation: sign_violation,
            hard_brake,
            jerk,
            goal_reached,
            route_progress: self.progress,
        }
    }

    pub fn agent_states(&self) -> Vec<AgentState> {
        let mut out = Vec::with_capacity(1 + self.vehicles.len() + self.peds.len());
        let (ec, _, elat) = self.map.locate(Vec2::new(self.ego.x, self.ego.y), self.ego.yaw);
        let ego_lane = self.map.corridor(ec).lane_at_offset(elat);
        out.push(AgentState {
            id: 0,
            kind: AgentKind::Ego,
            x: self.ego.x,
            y: self.ego.y,
            yaw: self.ego.yaw,
            speed: self.ego.v,
            accel: self.ego.accel,
            lane_id: (ec * 8 + ego_lane) as u32,
            half_length: VEHICLE_HALF_LEN,
            half_width: VEHICLE_HALF_WID,
        });
        for (i, bg) in self.vehicles.iter().enumerate() {
            let c = self.map.corridor(bg.corridor);
            let (pos, heading) = c.pose_at(bg.s, bg.lat);
            out.push(AgentState {
                id: (i + 1) as u32,
                kind: AgentKind::Vehicle,
                x: pos.x,
                y: pos.y,
                yaw: wrap_angle(heading),
                speed: bg.v,
                accel: bg.accel,
                lane_id: (bg.corridor * 8 + bg.lane) as u32,
                half_length: VEHICLE_HALF_LEN,
                half_width: VEHICLE_HALF_WID,
            });
        }
        let nv = self.vehicles.len();
        for (i, ped) in self.peds.iter().enumerate() {
            let c = self.map.corridor(ped.corridor);
            let (pos, heading) = c.pose_at(ped.s, ped.lat);
            let crossing = ped.phase == PedPhase::Crossing;
            let walk_yaw = heading + ped.dir * std::f64::consts::FRAC_PI_2;
            out.push(AgentState {
                id: (nv + i + 1) as u32,
                kind: AgentKind::Pedestrian,
                x: pos.x,
                y: pos.y,
                yaw: wrap_angle(walk_yaw),
                speed: if crossing { PED_WALK_SPEED } else { 0.0 },
                accel: 0.0,
                lane_id: (ped.corridor * 8) as u32,
                half_length: PED_HALF,
                half_width: PED_HALF,
            });
        }
        out
    }

    /// Next stop line along the route from the ego position, as
    /// (corridor, distance, control).
    fn next_stop_line(&self, from_c: CorridorId, from_s: f64) -> Option<(CorridorId, f64, StopControl)> {
        let mut dist = 0.0;
        let mut cid = from_c;
        let mut s = from_s;
        for _ in 0..6 {
            let c = self.map.corridor(cid);
            if let Some(line) = &c.stop_line {
                if line.s >= s && !self.crossed_lines.contains(&cid) {
                    return Some((cid, dist + line.s - s, line.control));
                }
            }
            dist += c.centerline.length() - s;
            if dist > 200.0 {
                return None;
            }
            // follow the route chain when on it, else the default successor
            let next = self
                .route
                .corridors
                .iter()
                .position(|&r| r == cid)
                .and_then(|i| self.route.corridors.get(i + 1).copied())
                .unwrap_or_else(|| c.successors[0]);
            cid = next;
            s = 0.0;
        }
        None
    }

    fn ego_context(&self) -> EgoRoadContext {
        let ego_pos = Vec2::new(self.ego.x, self.ego.y);
        let (cid, s, lat) = self.map.locate(ego_pos, self.ego.yaw);
        let c = self.map.corridor(cid);
        let lane = c.lane_at_offset(lat);
        let lane_off = lat - c.lane_center_offset(lane);
        let half_w = c.drivable_half_width();
        let lane_heading = c.centerline.heading_at(s);
        let s_ahead = (s + 2.0).min(c.centerline.length());
        let lane_curvature = if s_ahead > s + 0.1 {
            wrap_angle(c.centerline.heading_at(s_ahead) - lane_heading) / (s_ahead - s)
        } else {
            0.0
        };

        let stop = self.next_stop_line(cid, s);
        let (dist_stop, signal, stop_required) = match stop {
            Some((line_c, d, control)) => {
                let sign_done = line_c == cid && self.ego_sign_done;
                let state = self.signal_for(control, sign_done);
                let required = match control {
                    StopControl::Signal { .. } => match state {
                        SignalState::Red => true,
                        SignalState::Yellow => self.ego.v * self.ego.v / (2.0 * d.max(0.1)) < 3.5,
                        SignalState::Green => false,
                    },
                    StopControl::StopSign => !sign_done,
                };
                (d, state, required)
            }
            None => (f64::INFINITY, SignalState::Green, false),
        };

        // route heading error and progress at the current projection
        let (rs, _) = self.route.polyline.project(ego_pos);
        let route_heading = self.route.polyline.heading_at(rs);

        // in-lane leader, adjacent-lane gaps, static obstacle, crossing ped
        let agents = self.agent_states();
        let ego_heading = Vec2::unit_from_angle(self.ego.yaw);
        let mut leader: Option<(f64, f64)> = None;
        let mut static_dist = f64::INFINITY;
        let mut left_gaps = (f64::INFINITY, f64::INFINITY);
        let mut right_gaps = (f64::INFINITY, f64::INFINITY);
        let mut ped_dist = f64::INFINITY;
        for a in &agents[1..] {
            let rel = Vec2::new(a.x - self.ego.x, a.y - self.ego.y);
            let fwd = rel.dot(ego_heading);
            let side = ego_heading.cross(rel); // + left
            let gap = fwd - (VEHICLE_HALF_LEN + a.half_length);
            if fwd > 0.0 && side.abs() < c.lane_width * 0.55 {
                if leader.map_or(true, |(g, _)| gap < g) {
                    leader = Some((gap, a.speed));
                }
                if a.speed < 0.2 {
                    static_dist = static_dist.min(gap.max(0.0));
                }
                if a.kind == AgentKind::Pedestrian && a.speed > 0.1 {
                    ped_dist = ped_dist.min(gap.max(0.0));
                }
            }
            // adjacent lanes
            for (exists, center, slot) in [
                (lane + 1 < c.n_lanes, c.lane_width, &mut left_gaps),
                (lane > 0, -c.lane_width, &mut right_gaps),
            ] {
                if exists && (side - center).abs() < c.lane_width * 0.55 {
                    if fwd >= 0.0 {
                        slot.0 = slot.0.min(gap.max(0.0));
                    } else {
                        slot.1 = slot.1.min((-fwd - (VEHICLE_HALF_LEN + a.half_length)).max(0.0));
                    }
                }
            }
        }

        let next_limit = {
            let next = self
                .route
                .corridors
                .iter()
                .position(|&r| r == cid)
                .and_then(|i| self.route.corridors.get(i + 1).copied())
                .unwrap_or_else(|| c.successors[0]);
            let nl = self.map.corridor(next).speed_limit;
            (nl < c.speed_limit).then(|| (c.centerline.length() - s, nl))
        };

        EgoRoadContext {
            corridor: cid,
            lane,
            n_lanes: c.n_lanes,
            lane_width: c.lane_width,
            speed_limit: c.speed_limit,
            lane_center_offset: lane_off,
            lane_heading,
            lane_curvature,
            dist_left_boundary: half_w - lat,
            dist_right_boundary: half_w + lat,
            dist_stop_line: dist_stop,
            signal_state: signal,
            stop_required,
            route_heading_error: wrap_angle(route_heading - self.ego.yaw),
            route_progress: self.progress,
            lane_exists_left: lane + 1 < c.n_lanes,
            lane_exists_right: lane > 0,
            leader,
            left_gaps,
            right_gaps,
            static_obstacle_dist: static_dist,
            crossing_ped_dist: ped_dist,
            next_limit,
        }
    }

    pub fn observe(&self) -> Observation {
        Observation {
            step: self.step,
            time: self.time(),
            dt: self.config.dt,
            agents: self.agent_states(),
            ego_ctx: self.ego_context(),
        }
    }
}

#[cfg(test)]
mod tests;
