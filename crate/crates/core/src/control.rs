//! Rule-based low-level execution: sub-actions map to calibrated behavior
//! parameters, world-model hints fold into a bucketized risk score that picks
//! a control mode, and a per-step controller produces speed-tracking,
//! gap-keeping, stop-line, and lane-change commands.

use crate::geom::wrap_angle;
use crate::reasoner::{ActionTemplate, Intensity, SubAction};
use crate::sim::{car_following_accel, ControlCommand, EgoRoadContext, MAX_BRAKE, MAX_STEER};
use serde::{Deserialize, Serialize};

/// Units for the speed-up/speed-down increments (the maintain offset and
/// lane-change bias are always km/h).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedDeltaUnits {
    Mps,
    Kmh,
}

impl Default for SpeedDeltaUnits {
    fn default() -> Self {
        SpeedDeltaUnits::Mps
    }
}

/// Hints distilled from world-model rollouts; absent objects read +inf
/// (lane offset reads 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WMHints {
    pub front_gap: f64,
    pub front_ttc: f64,
    pub lane_offset_norm: f64,
    pub static_obstacle_dist: f64,
}

impl WMHints {
    pub fn none() -> Self {
        Self {
            front_gap: f64::INFINITY,
            front_ttc: f64::INFINITY,
            lane_offset_norm: 0.0,
            static_obstacle_dist: f64::INFINITY,
        }
    }

    pub fn sanitized(self) -> Self {
        let pos = |v: f64| if v.is_nan() { f64::INFINITY } else { v.max(0.0) };
        Self {
            front_gap: pos(self.front_gap),
            front_ttc: pos(self.front_ttc),
            lane_offset_norm: pos(self.lane_offset_norm),
            static_obstacle_dist: pos(self.static_obstacle_dist),
        }
    }
}

/// Bucketized risk score. Each term contributes its single strictest
/// matching bucket: front gap below 3/6/10 m adds 3/2/1; TTC below
/// 1.5/2.5/4.0 s adds 3/2/1; static-obstacle distance below 4/8 m adds 2/1;
/// lane-offset norm above 1.3/1.1 adds 2/1.
pub fn compute_risk(hints: &WMHints) -> u32 {
    let h = hints.sanitized();
    let r_gap = if h.front_gap < 3.0 {
        3
    } else if h.front_gap < 6.0 {
        2
    } else if h.front_gap < 10.0 {
        1
    } else {
        0
    };
    let r_ttc = if h.front_ttc < 1.5 {
        3
    } else if h.front_ttc < 2.5 {
        2
    } else if h.front_ttc < 4.0 {
        1
    } else {
        0
    };
    let r_static = if h.static_obstacle_dist < 4.0 {
        2
    } else if h.static_obstacle_dist < 8.0 {
        1
    } else {
        0
    };
    let r_lane = if h.lane_offset_norm > 1.3 {
        2
    } else if h.lane_offset_norm > 1.1 {
        1
    } else {
        0
    };
    r_gap + r_ttc + r_static + r_lane
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
}

impl RiskLevel {
    pub fn name(self) -> &'static str {
        match self {
            RiskLevel::Low => "low",
            RiskLevel::Medium => "medium",
            RiskLevel::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanePermission {
    TemplateConditioned,
    Restricted,
    Disabled,
}

/// Control regime selected by the risk score. Only the three fixed
/// parameterizations are constructible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmMode {
    pub level: RiskLevel,
    pub follow_distance: f64,
    pub min_speed_reduction: f64,
    pub lane_change_permission: LanePermission,
}

pub fn select_mode(r: u32) -> TmMode {
    if r >= 5 {
        TmMode {
            level: RiskLevel::High,
            follow_distance: 5.0,
            min_speed_reduction: 0.30,
            lane_change_permission: LanePermission::Disabled,
        }
    } else if r >= 3 {
        TmMode {
            level: RiskLevel::Medium,
            follow_distance: 3.0,
            min_speed_reduction: 0.15,
            lane_change_permission: LanePermission::Restricted,
        }
    } else {
        TmMode {
            level: RiskLevel::Low,
            follow_distance: 1.8,
            min_speed_reduction: 0.0,
            lane_change_permission: LanePermission::TemplateConditioned,
        }
    }
}

/// Calibrated behavior parameters for the execution layer. Lane intent uses
/// -1 for left, +1 for right, 0 for none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorParams {
    pub target_speed: f64,
    pub lane_intent: i8,
    pub brake_cap: f64,
    /// Emergency override: maximum braking regardless of mode.
    pub emergency: bool,
}

/// Map a sub-action onto behavior parameters around the current target speed.
pub fn map_subaction(sub: &SubAction, current_target: f64, units: SpeedDeltaUnits) -> BehaviorParams {
    let delta = match units {
        SpeedDeltaUnits::Mps => sub.speed_delta,
        SpeedDeltaUnits::Kmh => sub.speed_delta / 3.6,
    };
    let bias = sub.speed_bias_kmh / 3.6;
    // speed templates adjust the cruise target but never command a full
    // stop themselves; stopping is the stop template's or the stop-line
    // governor's job
    const CRUISE_FLOOR: f64 = 1.0;
    match sub.template {
        ActionTemplate::SpeedUp | ActionTemplate::SpeedDown => BehaviorParams {
            target_speed: (current_target + delta).max(CRUISE_FLOOR),
            lane_intent: 0,
            brake_cap: 1.0,
            emergency: false,
        },
        ActionTemplate::MaintainSpeed => BehaviorParams {
            target_speed: (current_target + bias).max(0.0),
            lane_intent: 0,
            brake_cap: 1.0,
            emergency: false,
        },
        ActionTemplate::LaneChangeLeft | ActionTemplate::LaneChangeRight => BehaviorParams {
            target_speed: (current_target + bias).max(0.0),
            lane_intent: if sub.template == ActionTemplate::LaneChangeLeft { -1 } else { 1 },
            brake_cap: 1.0,
            emergency: false,
        },
        ActionTemplate::Stop => BehaviorParams {
            target_speed: 0.0,
            lane_intent: 0,
            brake_cap: sub.brake_cap,
            emergency: false,
        },
        ActionTemplate::NormalBehavior => match sub.label {
            Intensity::Maintain => BehaviorParams {
                target_speed: current_target,
                lane_intent: 0,
                brake_cap: 1.0,
                emergency: false,
            },
            Intensity::Stop => BehaviorParams {
                target_speed: 0.0,
                lane_intent: 0,
                brake_cap: 1.0,
                emergency: false,
            },
            _ => BehaviorParams {
                target_speed: (current_target + delta).max(CRUISE_FLOOR),
                lane_intent: 0,
                brake_cap: 1.0,
                emergency: false,
            },
        },
    }
}

/// Active lane change tracked in corridor-lateral coordinates so crossing the
/// lane boundary does not re-base the target.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LaneChange {
    from_lane: usize,
    to_lane: usize,
    /// 0..1, completing in 3 s at a constant rate.
    progress: f64,
}

/// Small per-episode controller state.
#[derive(Debug, Clone, Default)]
pub struct ControllerState {
    lc: Option<LaneChange>,
    /// Set when the last intent pointed at a nonexistent lane.
    pub lane_intent_blocked: bool,
}

impl ControllerState {
    pub fn lane_change_active(&self) -> bool {
        self.lc.is_some()
    }
}

/// Per-step controller log values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlTrace {
    pub effective_target: f64,
    pub override_active: bool,
    pub lane_intent: i8,
}

fn lane_center(lane: usize, n_lanes: usize, width: f64) -> f64 {
    (lane as f64 - (n_lanes as f64 - 1.0) / 2.0) * width
}

const LC_DURATION: f64 = 3.0;
const HEADWAY: f64 = 0.9;
const GAIN_SPEED: f64 = 0.5;
const GAIN_GAP: f64 = 0.8;

/// One control step: longitudinal speed tracking with gap keeping at the mode
/// follow distance and stop-line compliance, lateral lane keeping or a
/// constant-rate lane-change blend, deceleration clipped by the brake cap,
/// and the emergency override forcing maximum braking.
pub fn produce_control(
    params: &BehaviorParams,
    mode: &TmMode,
    ctx: &EgoRoadContext,
    ego_speed: f64,
    ego_yaw: f64,
    dt: f64,
    state: &mut ControllerState,
) -> (ControlCommand, ControlTrace) {
    // lane-change bookkeeping
    state.lane_intent_blocked = false;
    if params.lane_intent != 0 && state.lc.is_none() && !params.emergency {
        // spec convention: -1 = left; lane indices grow leftward
        let to = if params.lane_intent < 0 {
            (ctx.lane + 1 < ctx.n_lanes).then_some(ctx.lane + 1)
        } else {
            ctx.lane.checked_sub(1)
        };
        let permitted = match mode.lane_change_permission {
            LanePermission::Disabled => false,
            LanePermission::Restricted => {
                let (front, rear) =
                    if params.lane_intent < 0 { ctx.left_gaps } else { ctx.right_gaps };
                front > 10.0 && rear > 10.0
            }
            LanePermission::TemplateConditioned => true,
        };
        match (to, permitted) {
            (Some(to), true) => {
                state.lc = Some(LaneChange { from_lane: ctx.lane, to_lane: to, progress: 0.0 })
            }
            (None, _) => state.lane_intent_blocked = true,
            _ => {}
        }
    }

    // lateral target in corridor coordinates
    let ego_lat = lane_center(ctx.lane, ctx.n_lanes, ctx.lane_width) + ctx.lane_center_offset;
    let desired_lat = match &mut state.lc {
        Some(lc) => {
            lc.progress = (lc.progress + dt / LC_DURATION).min(1.0);
            let from = lane_center(lc.from_lane, ctx.n_lanes, ctx.lane_width);
            let to = lane_center(lc.to_lane, ctx.n_lanes, ctx.lane_width);
            let target = from + (to - from) * lc.progress;
            if lc.progress >= 1.0 && ctx.lane == lc.to_lane && ctx.lane_center_offset.abs() < 0.5 {
                state.lc = None;
            }
            target
        }
        None => lane_center(ctx.lane, ctx.n_lanes, ctx.lane_width),
    };

    let heading_err = wrap_angle(ctx.lane_heading - ego_yaw);
    let lat_err = desired_lat - ego_lat;
    let steer_ff = (ctx.lane_curvature * crate::sim::EGO_WHEELBASE).atan();
    let steer = (steer_ff + heading_err + (1.1 * lat_err / (ego_speed + 2.0)).atan())
        .clamp(-MAX_STEER, MAX_STEER);

    let trace_intent = state.lc.map_or(0, |lc| if lc.to_lane > lc.from_lane { -1 } else { 1 });

    if params.emergency {
        let cmd = ControlCommand {
            accel_cmd: -MAX_BRAKE * params.brake_cap,
            steer,
            brake_cap: params.brake_cap,
        }
        .clamped();
        return (
            cmd,
            ControlTrace {
                effective_target: 0.0,
                override_active: true,
                lane_intent: trace_intent,
            },
        );
    }

    // effective target: template target capped by the limit, reduced by mode
    let mut limit = ctx.speed_limit;
    if let Some((d, nl)) = ctx.next_limit {
        limit = limit.min((nl * nl + 2.0 * 2.5 * d.max(0.0)).sqrt());
    }
    let effective_target = params.target_speed.min(limit) * (1.0 - mode.min_speed_reduction);

    let mut accel = GAIN_SPEED * (effective_target - ego_speed);

    // gap keeping at the mode follow distance plus a speed headway
    if let Some((gap, v_lead)) = ctx.leader {
        let desired_gap = mode.follow_distance + HEADWAY * ego_speed;
        let gap_cmd = GAIN_GAP * (gap - desired_gap) + GAIN_SPEED * (v_lead - ego_speed);
        accel = accel.min(gap_cmd);
        // anti-collision envelope shared with the background policy; inert
        // while parked with no closing motion
        if ego_speed > 0.3 || ego_speed - v_lead > 0.0 {
            let env =
                car_following_accel(dt, ego_speed, effective_target.max(0.5), Some((gap, v_lead)), None);
            accel = accel.min(env.max(-MAX_BRAKE));
        }
    }

    // stop lines and crossing pedestrians
    let mut stop: Option<f64> = ctx.stop_required.then_some(ctx.dist_stop_line);
    if ctx.crossing_ped_dist.is_finite() {
        let d = (ctx.crossing_ped_dist - 2.0).max(0.0);
        stop = Some(stop.map_or(d, |s| s.min(d)));
    }
    if stop.is_some() {
        let env = car_following_accel(dt, ego_speed, effective_target.max(0.5), None, stop);
        accel = accel.min(env);
    }

    let cmd = ControlCommand { accel_cmd: accel, steer, brake_cap: params.brake_cap }.clamped();
    (
        cmd,
        ControlTrace {
            effective_target,
            override_active: false,
            lane_intent: trace_intent,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::expand_candidates;
    use crate::sim::map::SignalState;

    fn ctx() -> EgoRoadContext {
        EgoRoadContext {
            corridor: 0,
            lane: 0,
            n_lanes: 2,
            lane_width: 3.5,
            speed_limit: 10.0,
            lane_center_offset: 0.0,
            lane_heading: 0.0,
            lane_curvature: 0.0,
            dist_left_boundary: 5.25,
            dist_right_boundary: 1.75,
            dist_stop_line: f64::INFINITY,
            signal_state: SignalState::Green,
            stop_required: false,
            route_heading_error: 0.0,
            route_progress: 0.0,
            lane_exists_left: true,
            lane_exists_right: false,
            leader: None,
            left_gaps: (f64::INFINITY, f64::INFINITY),
            right_gaps: (f64::INFINITY, f64::INFINITY),
            static_obstacle_dist: f64::INFINITY,
            crossing_ped_dist: f64::INFINITY,
            next_limit: None,
        }
    }

    /// speed_up/hard at target 10 -> 11.
    #[test]
    fn map_speed_up_hard() {
        let sub = expand_candidates(ActionTemplate::SpeedUp)[2];
        let p = map_subaction(&sub, 10.0, SpeedDeltaUnits::Mps);
        assert!((p.target_speed - 11.0).abs() < 1e-12);
        assert_eq!(p.lane_intent, 0);
    }

    /// stop/soft caps braking at 0.4; base and hard at 0.7 and 1.0.
    #[test]
    fn map_stop_brake_caps() {
        let group = expand_candidates(ActionTemplate::Stop);
        for (sub, cap) in group.iter().zip([0.4, 0.7, 1.0]) {
            let p = map_subaction(sub, 8.0, SpeedDeltaUnits::Mps);
            assert_eq!(p.target_speed, 0.0);
            assert!((p.brake_cap - cap).abs() < 1e-12);
        }
    }

    /// lane_change_left/fast at 36 km/h -> intent -1, target 39 km/h.
    #[test]
    fn map_lane_change_fast() {
        let sub = expand_candidates(ActionTemplate::LaneChangeLeft)[2];
        let p = map_subaction(&sub, 10.0, SpeedDeltaUnits::Mps);
        assert_eq!(p.lane_intent, -1);
        assert!((p.target_speed * 3.6 - 39.0).abs() < 1e-9);
    }

    #[test]
    fn map_normal_levels() {
        let group = expand_candidates(ActionTemplate::NormalBehavior);
        let keep = map_subaction(&group[0], 9.0, SpeedDeltaUnits::Mps);
        assert_eq!(keep.target_speed, 9.0);
        let dec = map_subaction(&group[1], 9.0, SpeedDeltaUnits::Mps);
        assert!((dec.target_speed - 8.2).abs() < 1e-12);
        let hard = map_subaction(&group[2], 9.0, SpeedDeltaUnits::Mps);
        assert!((hard.target_speed - 6.5).abs() < 1e-12);
        let stop = map_subaction(&group[3], 9.0, SpeedDeltaUnits::Mps);
        assert_eq!(stop.target_speed, 0.0);
    }

    #[test]
    fn map_kmh_units() {
        let sub = expand_candidates(ActionTemplate::SpeedUp)[2];
        let p = map_subaction(&sub, 10.0, SpeedDeltaUnits::Kmh);
        assert!((p.target_speed - (10.0 + 1.0 / 3.6)).abs() < 1e-12);
    }

    /// gap=2.5, ttc=1.0, static absent, lane 0.5 -> 3+3+0+0 = 6.
    #[test]
    fn risk_example_high() {
        let h = WMHints { front_gap: 2.5, front_ttc: 1.0, lane_offset_norm: 0.5, static_obstacle_dist: f64::INFINITY };
        assert_eq!(compute_risk(&h), 6);
    }

    #[test]
    fn risk_all_clear() {
        assert_eq!(compute_risk(&WMHints::none()), 0);
    }

    /// gap=7 (+1), ttc=3.0 (+1), static=6 (+1), lane=1.2 (+1) -> 4.
    #[test]
    fn risk_example_medium() {
        let h = WMHints { front_gap: 7.0, front_ttc: 3.0, lane_offset_norm: 1.2, static_obstacle_dist: 6.0 };
        assert_eq!(compute_risk(&h), 4);
    }

    /// Element-wise worsening never decreases the score.
    #[test]
    fn risk_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let h = WMHints {
                front_gap: rng.random_range(0.0..15.0),
                front_ttc: rng.random_range(0.0..6.0),
                lane_offset_norm: rng.random_range(0.0..2.0),
                static_obstacle_dist: rng.random_range(0.0..12.0),
            };
            let worse = WMHints {
                front_gap: h.front_gap - rng.random_range(0.0..3.0),
                front_ttc: h.front_ttc - rng.random_range(0.0..2.0),
                lane_offset_norm: h.lane_offset_norm + rng.random_range(0.0..0.5),
                static_obstacle_dist: h.static_obstacle_dist - rng.random_range(0.0..3.0),
            };
            assert!(compute_risk(&worse) >= compute_risk(&h));
        }
    }

    /// Mode thresholds are exact at the boundaries.
    #[test]
    fn mode_boundaries() {
        assert_eq!(select_mode(0).level, RiskLevel::Low);
        assert_eq!(select_mode(0).follow_distance, 1.8);
        assert_eq!(select_mode(2).level, RiskLevel::Low);
        assert_eq!(select_mode(3).level, RiskLevel::Medium);
        assert_eq!(select_mode(4).level, RiskLevel::Medium);
        assert_eq!(select_mode(4).follow_distance, 3.0);
        assert_eq!(select_mode(5).level, RiskLevel::High);
        assert_eq!(select_mode(5).follow_distance, 5.0);
        assert_eq!(select_mode(6).level, RiskLevel::High);
        assert!(select_mode(5).min_speed_reduction >= 0.30);
        assert_eq!(select_mode(5).lane_change_permission, LanePermission::Disabled);
    }

    /// High mode caps the effective target at 70% of the limit.
    #[test]
    fn high_mode_speed_cap() {
        let params = BehaviorParams { target_speed: 10.0, lane_intent: 0, brake_cap: 1.0, emergency: false };
        let mode = select_mode(6);
        let mut st = ControllerState::default();
        let (_, trace) = produce_control(&params, &mode, &ctx(), 5.0, 0.0, 0.1, &mut st);
        assert!(trace.effective_target <= 7.0 + 1e-12);
    }

    /// Standstill equilibrium: stopped at the follow distance behind a
    /// stopped leader commands nothing.
    #[test]
    fn gap_controller_equilibrium() {
        let params = BehaviorParams { target_speed: 0.0, lane_intent: 0, brake_cap: 1.0, emergency: false };
        let mode = select_mode(0);
        let mut c = ctx();
        c.leader = Some((mode.follow_distance, 0.0));
        let mut st = ControllerState::default();
        let (cmd, _) = produce_control(&params, &mode, &c, 0.0, 0.0, 0.1, &mut st);
        assert!(cmd.accel_cmd.abs() < 0.2, "accel {}", cmd.accel_cmd);
    }

    /// Emergency override with full braking authority commands -8.
    #[test]
    fn emergency_override_full_brake() {
        let params = BehaviorParams { target_speed: 0.0, lane_intent: 0, brake_cap: 1.0, emergency: true };
        let mode = select_mode(0);
        let mut st = ControllerState::default();
        let (cmd, trace) = produce_control(&params, &mode, &ctx(), 8.0, 0.0, 0.1, &mut st);
        assert_eq!(cmd.accel_cmd, -8.0);
        assert!(trace.override_active);
    }

    /// A lane intent into a nonexistent lane is cleared and flagged.
    #[test]
    fn lane_intent_blocked() {
        let params = BehaviorParams { target_speed: 8.0, lane_intent: 1, brake_cap: 1.0, emergency: false };
        let mode = select_mode(0);
        let mut st = ControllerState::default();
        // lane 0 is the rightmost: a right change has nowhere to go
        let (_, trace) = produce_control(&params, &mode, &ctx(), 8.0, 0.0, 0.1, &mut st);
        assert!(st.lane_intent_blocked);
        assert!(!st.lane_change_active());
        assert_eq!(trace.lane_intent, 0);
    }

    /// High-risk mode refuses lane changes outright.
    #[test]
    fn high_mode_blocks_lane_change() {
        let params = BehaviorParams { target_speed: 8.0, lane_intent: -1, brake_cap: 1.0, emergency: false };
        let mode = select_mode(6);
        let mut st = ControllerState::default();
        produce_control(&params, &mode, &ctx(), 8.0, 0.0, 0.1, &mut st);
        assert!(!st.lane_change_active());
    }

    /// A permitted lane change blends laterally and completes.
    #[test]
    fn lane_change_executes() {
        let params = BehaviorParams { target_speed: 8.0, lane_intent: -1, brake_cap: 1.0, emergency: false };
        let mode = select_mode(0);
        let mut st = ControllerState::default();
        let mut c = ctx();
        let (_, trace) = produce_control(&params, &mode, &c, 8.0, 0.0, 0.1, &mut st);
        assert!(st.lane_change_active());
        assert_eq!(trace.lane_intent, -1);
        // steer left initially
        let (cmd, _) = produce_control(&params, &mode, &c, 8.0, 0.0, 0.1, &mut st);
        assert!(cmd.steer > 0.0);
        // after the blend duration in the target lane, the change retires
        c.lane = 1;
        c.lane_center_offset = 0.1;
        for _ in 0..35 {
            produce_control(&params, &mode, &c, 8.0, 0.0, 0.1, &mut st);
        }
        assert!(!st.lane_change_active());
    }
}
