//! Episode orchestration: the per-step decision loop, seeded point-goal
//! episodes, and multi-episode benchmarks with paired seeds across agent
//! variants.

pub mod metrics;

pub use metrics::{compute_metrics, result_from_trace, summary_table, BenchmarkSummary, EpisodeResult};

use crate::config::{AgentVariant, FaultInjection, ReasonerKind, RunConfig};
use crate::control::{
    compute_risk, map_subaction, produce_control, select_mode, BehaviorParams, ControllerState,
    SpeedDeltaUnits, TmMode, WMHints,
};
use crate::geom::{wrap_angle, Vec2};
use crate::reasoner::{
    base_subaction, update_memory, ExternalReasoner, MemoryBuffer, Reasoner, SceneSummary, Score,
};
use crate::safety::{
    hard_risk_precheck, post_override, select_safest, verification_summary, FallbackReason,
};
use crate::sim::trace::{CtrlLog, TraceRecord, TraceWriter, VerdictLog};
use crate::sim::{spawn_episode, ControlCommand, Observation, SimError, Termination, WorldConfig};
use crate::state::{build_state, StructuredState};
use crate::wm::{Belief, EpisodeOrigin, Rollout, WorldModel, ACTION_DIM};
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

/// One agent instance drives one episode.
pub struct Agent {
    variant: AgentVariant,
    wm: Option<Arc<WorldModel>>,
    reasoner: Option<Reasoner>,
    units: SpeedDeltaUnits,
    horizon: usize,
    memory_k: usize,
    fault: FaultInjection,
    decision_every: u64,

    memory: MemoryBuffer,
    belief: Option<Belief>,
    origin: EpisodeOrigin,
    /// Continuous ego yaw fed to the model (matches training).
    cont_yaw: f64,
    prev_wrapped_yaw: f64,
    /// Last model-frame state, for decisions.
    wm_state: StructuredState,
    target_speed: f64,
    behavior: BehaviorParams,
    mode: TmMode,
    ctrl: ControllerState,
    decision_count: u64,
    rollout_attempts: u64,
    /// Rollouts actually performed (instrumentation).
    pub total_rollouts: u64,
}

fn build_reasoner(kind: &ReasonerKind) -> Reasoner {
    match kind {
        ReasonerKind::Scripted => Reasoner::Scripted,
        ReasonerKind::ScriptedSingleEvery(n) => Reasoner::ScriptedSingleEvery(*n),
        ReasonerKind::External(ep) => Reasoner::External(ExternalReasoner::new(ep.clone())),
    }
}

impl Agent {
    pub fn new(cfg: &RunConfig, wm: Option<Arc<WorldModel>>) -> Self {
        let reasoner = match cfg.variant {
            AgentVariant::TmOnly => None,
            _ => Some(build_reasoner(&cfg.reasoner)),
        };
        Self {
            variant: cfg.variant,
            wm: if cfg.variant == AgentVariant::RiaFull { wm } else { None },
            reasoner,
            units: cfg.speed_delta_units,
            horizon: cfg.horizon,
            memory_k: cfg.memory_k,
            fault: cfg.fault,
            decision_every: cfg.decision_every.max(1),
            memory: MemoryBuffer::new(cfg.memory_k),
            belief: None,
            origin: EpisodeOrigin::default(),
            cont_yaw: 0.0,
            prev_wrapped_yaw: 0.0,
            wm_state: StructuredState::default(),
            target_speed: 0.0,
            behavior: BehaviorParams { target_speed: 0.0, lane_intent: 0, brake_cap: 1.0, emergency: false },
            mode: select_mode(0),
            ctrl: ControllerState::default(),
            decision_count: 0,
            rollout_attempts: 0,
            total_rollouts: 0,
        }
    }

    pub fn begin_episode(&mut self, obs: &Observation) {
        let ego = &obs.agents[0];
        self.memory = MemoryBuffer::new(self.memory_k);
        self.belief = self.wm.as_ref().map(|wm| wm.init_belief());
        self.origin = EpisodeOrigin { x: ego.x, y: ego.y };
        self.cont_yaw = ego.yaw;
        self.prev_wrapped_yaw = ego.yaw;
        self.wm_state = StructuredState::default();
        self.target_speed = obs.ego_ctx.speed_limit;
        self.behavior = BehaviorParams {
            target_speed: self.target_speed,
            lane_intent: 0,
            brake_cap: 1.0,
            emergency: false,
        };
        self.mode = select_mode(0);
        self.ctrl = ControllerState::default();
        self.decision_count = 0;
        self.rollout_attempts = 0;
        self.total_rollouts = 0;
    }

    /// Per-step belief tracking: the recurrent state follows the control
    /// frequency it was trained at, fed with the last executed action. Ego
    /// yaw is continuized into the training representation.
    pub fn track(&mut self, state: &StructuredState) {
        let wrapped = state.0[crate::state::EGO_YAW];
        self.cont_yaw += wrap_angle(wrapped - self.prev_wrapped_yaw);
        self.prev_wrapped_yaw = wrapped;
        let mut model_state = *state;
        model_state.0[crate::state::EGO_YAW] = self.cont_yaw;
        self.wm_state = model_state;
        if let (Some(wm), Some(belief)) = (self.wm.as_ref(), self.belief.as_mut()) {
            *belief = wm.belief_update(belief, &model_state, self.origin);
        }
    }

    /// Record the executed command for the next belief update.
    pub fn executed(&mut self, cmd: ControlCommand) {
        if let Some(belief) = self.belief.as_mut() {
            let lane_signal = if self.ctrl.lane_change_active() {
                self.behavior.lane_intent as f64
            } else {
                0.0
            };
            belief.last_action = [cmd.accel_cmd, cmd.steer, lane_signal];
        }
    }

    /// Maintain-speed works around the measured recent speed; other templates
    /// adjust the standing cruise target.
    fn speed_reference(&self, sub: &crate::reasoner::SubAction, obs: &Observation) -> f64 {
        if sub.template == crate::reasoner::ActionTemplate::MaintainSpeed {
            obs.agents[0].speed
        } else {
            self.target_speed
        }
    }

    /// Constant action profile for a candidate rollout: the sub-action frozen
    /// into a (speed-tracking accel, lane-target steer, lane signal) triple.
    fn action_profile(&self, sub: &crate::reasoner::SubAction, obs: &Observation) -> [f64; ACTION_DIM] {
        let ctx = &obs.ego_ctx;
        let ego = &obs.agents[0];
        let params = map_subaction(sub, self.target_speed, self.units);
        let accel = (0.5 * (params.target_speed.min(ctx.speed_limit) - ego.speed))
            .clamp(-8.0 * params.brake_cap, 3.0);
        let lat_target = match params.lane_intent {
            -1 => ctx.lane_width,
            1 => -ctx.lane_width,
            _ => 0.0,
        };
        let heading_err = wrap_angle(ctx.lane_heading - ego.yaw);
        let steer = (heading_err
            + (1.1 * (lat_target - ctx.lane_center_offset) / (ego.speed + 2.0)).atan())
        .clamp(-0.5, 0.5);
        [accel, steer, params.lane_intent as f64]
    }

    /// Hints from the executed candidate's predicted trajectory.
    fn hints_from_rollout(&self, rollout: &Rollout, obs: &Observation) -> WMHints {
        let mut front_gap = f64::INFINITY;
        let mut front_ttc = f64::INFINITY;
        for (k, s) in rollout.states.iter().enumerate() {
            if let Some((gap, closing, _)) = s.front_object() {
                front_gap = front_gap.min(gap.max(0.0));
                if k == 0 && closing > 0.0 {
                    front_ttc = (gap.max(0.0) / closing).max(0.0);
                }
            }
        }
        WMHints {
            front_gap,
            front_ttc,
            lane_offset_norm: rollout.max_lateral() / (obs.ego_ctx.lane_width / 2.0),
            static_obstacle_dist: obs.ego_ctx.static_obstacle_dist,
        }
        .sanitized()
    }

    /// The Reason-Imagine-Act decision. Returns the per-decision log entry.
    pub fn decide(&mut self, obs: &Observation) -> VerdictLog {
        let state = build_state(obs);
        let summary = SceneSummary::from_observation(&state, &obs.ego_ctx);
        let idx = self.decision_count;
        self.decision_count += 1;

        match self.variant {
            AgentVariant::TmOnly => {
                self.target_speed = obs.ego_ctx.speed_limit;
                self.behavior = BehaviorParams {
                    target_speed: self.target_speed,
                    lane_intent: 0,
                    brake_cap: 1.0,
                    emergency: false,
                };
                self.mode = select_mode(0);
                VerdictLog {
                    template: "tm_only".into(),
                    selected_label: "native".into(),
                    fallback_reason: FallbackReason::None.name().into(),
                    override_applied: false,
                    costs: Vec::new(),
                    q: Score::Skipped.to_string(),
                    rollouts: 0,
                }
            }
            AgentVariant::ScriptedOnly | AgentVariant::LlmNoWm => {
                let (resp, _) =
                    self.reasoner.as_ref().expect("reasoner").decide(&summary, &self.memory, idx);
                let selected = base_subaction(resp.decision);
                self.behavior = map_subaction(&selected, self.speed_reference(&selected, obs), self.units);
                self.target_speed = self.behavior.target_speed;
                self.mode = select_mode(0);
                if self.variant == AgentVariant::LlmNoWm {
                    update_memory(
                        &mut self.memory,
                        resp.decision,
                        selected,
                        "verification disabled".into(),
                        Score::Skipped,
                        obs.step,
                    );
                }
                VerdictLog {
                    template: resp.decision.name().into(),
                    selected_label: selected.label.name().into(),
                    fallback_reason: FallbackReason::None.name().into(),
                    override_applied: false,
                    costs: Vec::new(),
                    q: Score::Skipped.to_string(),
                    rollouts: 0,
                }
            }
            AgentVariant::RiaFull => self.decide_ria(obs, &state, &summary, idx),
        }
    }

    fn decide_ria(
        &mut self,
        obs: &Observation,
        state: &StructuredState,
        summary: &SceneSummary,
        idx: u64,
    ) -> VerdictLog {
        let wm = self.wm.clone().expect("ria_full requires a world model");
        let belief = self.belief.clone().expect("belief initialized");
        let (resp, _) =
            self.reasoner.as_ref().expect("reasoner").decide(summary, &self.memory, idx);
        let template = resp.decision;

        // hard-risk short circuit: no rollouts, emergency execution
        if hard_risk_precheck(state) {
            let selected = crate::reasoner::SubAction::emergency_stop();
            self.behavior = BehaviorParams {
                target_speed: 0.0,
                lane_intent: 0,
                brake_cap: selected.brake_cap,
                emergency: true,
            };
            self.mode = select_mode(compute_risk(&WMHints {
                front_gap: summary.leader.map_or(f64::INFINITY, |(g, _)| g),
                front_ttc: 0.0,
                lane_offset_norm: 0.0,
                static_obstacle_dist: obs.ego_ctx.static_obstacle_dist,
            }));
            let e = "hard-risk short circuit: imminent front collision; emergency stop".to_string();
            update_memory(&mut self.memory, template, selected, e, Score::HardTrigger, obs.step);
            return VerdictLog {
                template: template.name().into(),
                selected_label: selected.label.name().into(),
                fallback_reason: FallbackReason::HardPrecheck.name().into(),
                override_applied: false,
                costs: Vec::new(),
                q: Score::HardTrigger.to_string(),
                rollouts: 0,
            };
        }

        // refinement skipped when no candidate group exists
        if resp.candidates.is_empty() {
            let selected = base_subaction(template);
            self.behavior = map_subaction(&selected, self.target_speed, self.units);
            self.target_speed = self.behavior.target_speed;
            self.mode = select_mode(0);
            let e = "refinement skipped: no candidate group".to_string();
            update_memory(&mut self.memory, template, selected, e, Score::Skipped, obs.step);
            return VerdictLog {
                template: template.name().into(),
                selected_label: selected.label.name().into(),
                fallback_reason: FallbackReason::None.name().into(),
                override_applied: false,
                costs: Vec::new(),
                q: Score::Skipped.to_string(),
                rollouts: 0,
            };
        }

        // imagine: one rollout per candidate under a frozen action profile
        let mut rollouts: Vec<Option<Rollout>> = Vec::with_capacity(resp.candidates.len());
        let mut performed = 0u32;
        for cand in &resp.candidates {
            self.rollout_attempts += 1;
            let inject_failure = self
                .fault
                .rollout_failure_every
                .map_or(false, |n| n > 0 && self.rollout_attempts % n == 0);
            if inject_failure {
                rollouts.push(None);
                continue;
            }
            let profile = self.action_profile(cand, obs);
            performed += 1;
            self.total_rollouts += 1;
            rollouts.push(wm.rollout(&belief, &self.wm_state, self.origin, profile, self.horizon).ok());
        }

        let verdict =
            post_override(select_safest(&resp.candidates, &rollouts, template.is_lane_change()));
        let q = verdict.best_score().map(Score::Value).unwrap_or(Score::Skipped);
        let e = verification_summary(template, &verdict);

        // hints from the executed candidate's rollout (or the cheapest one
        // after an override)
        let exec_idx = resp
            .candidates
            .iter()
            .position(|c| c.matches(&verdict.selected))
            .or_else(|| {
                verdict
                    .costs
                    .iter()
                    .enumerate()
                    .filter_map(|(i, c)| c.as_ref().map(|c| (i, c.total)))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .map(|(i, _)| i)
            });
        let hints = exec_idx
            .and_then(|i| rollouts[i].as_ref())
            .map(|r| self.hints_from_rollout(r, obs))
            .unwrap_or_else(WMHints::none);

        self.behavior =
            map_subaction(&verdict.selected, self.speed_reference(&verdict.selected, obs), self.units);
        self.behavior.emergency = verdict.override_applied;
        self.target_speed = self.behavior.target_speed;
        self.mode = select_mode(compute_risk(&hints));

        update_memory(&mut self.memory, template, verdict.selected, e, q, obs.step);
        VerdictLog {
            template: template.name().into(),
            selected_label: verdict.selected.label.name().into(),
            fallback_reason: verdict.fallback_reason.name().into(),
            override_applied: verdict.override_applied,
            costs: verdict.costs.iter().map(|c| c.as_ref().map(|c| c.total)).collect(),
            q: q.to_string(),
            rollouts: performed,
        }
    }

    /// Per-step command from the active behavior parameters and mode.
    pub fn control(&mut self, obs: &Observation) -> (ControlCommand, CtrlLog) {
        let ego = &obs.agents[0];
        let (cmd, trace) = produce_control(
            &self.behavior,
            &self.mode,
            &obs.ego_ctx,
            ego.speed,
            ego.yaw,
            obs.dt,
            &mut self.ctrl,
        );
        let risk = self.mode;
        (
            cmd,
            CtrlLog {
                r: match risk.level {
                    crate::control::RiskLevel::Low => 0,
                    crate::control::RiskLevel::Medium => 3,
                    crate::control::RiskLevel::High => 5,
                },
                mode: risk.level.name().into(),
                effective_target_speed: trace.effective_target,
                override_active: trace.override_active,
                lane_intent: trace.lane_intent,
            },
        )
    }

    pub fn decision_due(&self, step: u64) -> bool {
        step % self.decision_every == 0
    }
}

/// Run one seeded episode to termination (goal, collision, timeout, stuck).
pub fn run_episode(
    cfg: &RunConfig,
    wm: Option<Arc<WorldModel>>,
    episode_index: usize,
    seed: u64,
    want_trace: bool,
) -> Result<(EpisodeResult, Option<Vec<u8>>), SimError> {
    let map = cfg.maps.map_for(episode_index);
    let sim_cfg = WorldConfig { map, ..cfg.sim.clone() };
    let mut world = spawn_episode(&sim_cfg, seed)?;
    let mut agent = Agent::new(cfg, wm);
    agent.begin_episode(&world.observe());

    let mut writer = if want_trace { Some(TraceWriter::new(Vec::new()).unwrap()) } else { None };
    let mut result = EpisodeResult {
        route_completion: 0.0,
        arrived: false,
        collided: false,
        red_light: 0,
        stop_sign: 0,
        offroad: 0,
        hard_brake: 0,
        high_jerk: 0,
        mean_abs_jerk: 0.0,
        steps: 0,
        termination: Termination::Timeout,
    };

    // degenerate route: spawned at the goal
    {
        let (x, y, _, _) = world.ego_pose();
        if Vec2::new(x, y).dist(world.route.goal) <= sim_cfg.goal_radius {
            result.arrived = true;
            result.route_completion = 1.0;
            result.termination = Termination::Goal;
            let trace = writer.map(|w| w.into_inner());
            return Ok((result, trace));
        }
    }

    let mut jerk_sum = 0.0;
    loop {
        let obs = world.observe();
        let state = build_state(&obs);
        agent.track(&state);
        let verdict_log = agent.decision_due(obs.step).then(|| agent.decide(&obs));
        let (cmd, ctrl_log) = agent.control(&obs);
        let (agents, events) = world.step_sim(cmd);
        agent.executed(cmd);

        result.steps += 1;
        result.route_completion = result.route_completion.max(events.route_progress);
        result.red_light += events.red_light_violation as u64;
        result.stop_sign += events.stop_sign_violation as u64;
        result.offroad += events.offroad as u64;
        result.hard_brake += events.hard_brake as u64;
        result.high_jerk += (events.jerk.abs() >= sim_cfg.high_jerk_thresh) as u64;
        jerk_sum += events.jerk.abs();

        if let Some(w) = writer.as_mut() {
            w.write(&TraceRecord {
                step: world.step_count(),
                agents,
                cmd,
                events,
                ctrl: Some(ctrl_log),
                verdict: verdict_log,
            })
            .unwrap();
        }

        if let Some(term) = world.terminated() {
            result.termination = term;
            match term {
                Termination::Goal => {
                    result.arrived = true;
                    result.route_completion = 1.0;
                }
                Termination::Collision => result.collided = true,
                _ => {}
            }
            break;
        }
    }
    result.mean_abs_jerk = if result.steps > 0 { jerk_sum / result.steps as f64 } else { 0.0 };

    Ok((result, writer.map(|w| w.into_inner())))
}

pub struct BenchmarkOutput {
    pub summary: BenchmarkSummary,
    pub results: Vec<EpisodeResult>,
    pub seeds: Vec<u64>,
    pub skipped: usize,
}

/// Run the configured episode set. Episode i uses seed `cfg.seed + i` and the
/// map rotation, so different variants under the same config see identical
/// worlds. Traces go to `out_dir` when given.
pub fn run_benchmark(
    cfg: &RunConfig,
    wm: Option<Arc<WorldModel>>,
    out_dir: Option<&Path>,
) -> std::io::Result<BenchmarkOutput> {
    let indices: Vec<usize> = (0..cfg.episodes).collect();
    let parallel = !matches!(cfg.reasoner, ReasonerKind::External(_));
    let want_trace = out_dir.is_some();

    let run_one = |&i: &usize| -> (usize, u64, Result<(EpisodeResult, Option<Vec<u8>>), SimError>) {
        let seed = cfg.seed + i as u64;
        (i, seed, run_episode(cfg, wm.clone(), i, seed, want_trace))
    };

    let mut raw: Vec<_> =
        if parallel { indices.par_iter().map(run_one).collect() } else { indices.iter().map(run_one).collect() };
    raw.sort_by_key(|(i, _, _)| *i);

    let mut results = Vec::new();
    let mut seeds = Vec::new();
    let mut skipped = 0usize;
    for (i, seed, outcome) in raw {
        match outcome {
            Ok((result, trace)) => {
                if let (Some(dir), Some(bytes)) = (out_dir, trace) {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join(format!("episode_{i:04}.trace")), bytes)?;
                }
                results.push(result);
                seeds.push(seed);
            }
            Err(e) => {
                eprintln!("episode {i} (seed {seed}) skipped: {e}");
                skipped += 1;
            }
        }
    }

    let mut summary = compute_metrics(&results)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    summary.config_hash = cfg.hash();
    summary.seeds = seeds.clone();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
        write_atomic(
            &dir.join("summary.txt"),
            summary_table(cfg.variant.name(), &summary).as_bytes(),
        )?;
        let mut lines = String::new();
        for r in &results {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        write_atomic(&dir.join("episodes.jsonl"), lines.as_bytes())?;
    }

    Ok(BenchmarkOutput { summary, results, seeds, skipped })
}

/// Write through a temp file so summaries are never partially visible.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests;
