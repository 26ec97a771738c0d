//! Transition dataset: expert-plus-noise collection in the simulator, the
//! line-delimited store format, and window preparation for training.

use super::params::ACTION_DIM;
use crate::sim::map::MapKind;
use crate::sim::{car_following_accel, spawn_episode, ControlCommand, Termination, WorldConfig};
use crate::state::{build_state, NormStats, StructuredState, EGO_X, EGO_YAW, EGO_Y, STATE_DIM};
use crate::geom::wrap_angle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

pub const DATA_HEADER: &str = "RIA-DATA v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub episode: u64,
    pub step: u64,
    pub s: StructuredState,
    pub a: [f64; ACTION_DIM],
    pub s_next: StructuredState,
    pub near_failure: bool,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

pub fn save_records<W: Write>(mut w: W, records: &[TransitionRecord]) -> Result<(), DataError> {
    writeln!(w, "{DATA_HEADER}")?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(|e| DataError::Malformed(e.to_string()))?)?;
    }
    Ok(())
}

pub fn load_records<R: BufRead>(r: R) -> Result<Vec<TransitionRecord>, DataError> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != DATA_HEADER {
        return Err(DataError::Malformed(format!("bad header {header:?}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Malformed(e.to_string()))?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub episodes: usize,
    /// Per-step perturbation probability.
    pub epsilon: f64,
    pub seed: u64,
    /// Cap on steps per collection episode.
    pub max_steps: u64,
    /// Maps cycled per episode.
    pub maps: Vec<MapKind>,
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            epsilon: 0.2,
            seed: 1,
            max_steps: 600,
            maps: vec![MapKind::Straight, MapKind::Grid, MapKind::Boulevard],
            n_vehicles: 30,
            n_pedestrians: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectStats {
    pub episodes: usize,
    pub total_steps: u64,
    pub perturbed_steps: u64,
    pub failure_episodes: usize,
    pub near_failure_records: usize,
}

/// Rule-based expert: lane keeping plus the same car-following logic the
/// background traffic uses, including stop lines and crossing pedestrians.
pub fn expert_command(obs: &crate::sim::Observation) -> ControlCommand {
    let ctx = &obs.ego_ctx;
    let ego = &obs.agents[0];

    let mut limit = ctx.speed_limit;
    if let Some((d, nl)) = ctx.next_limit {
        limit = limit.min((nl * nl + 2.0 * 2.5 * d.max(0.0)).sqrt());
    }
    let mut stop = ctx.stop_required.then_some(ctx.dist_stop_line);
    if ctx.crossing_ped_dist.is_finite() {
        let d = (ctx.crossing_ped_dist - 2.0).max(0.0);
        stop = Some(stop.map_or(d, |s: f64| s.min(d)));
    }
    let accel = car_following_accel(obs.dt, ego.speed, limit, ctx.leader, stop);

    let heading_err = wrap_angle(ctx.lane_heading - ego.yaw);
    let steer_ff = (ctx.lane_curvature * crate::sim::EGO_WHEELBASE).atan();
    let steer = (steer_ff + heading_err - (1.2 * ctx.lane_center_offset / (ego.speed + 2.0)).atan())
        .clamp(-0.5, 0.5);

    ControlCommand { accel_cmd: accel, steer, brake_cap: 1.0 }.clamped()
}

/// Drive the expert with epsilon-perturbed commands and record transitions.
/// Episodes that end in collision, off-road, or a lane-boundary crossing get
/// their final 3 s window tagged `near_failure`.
pub fn collect_dataset(cfg: &CollectConfig) -> (Vec<TransitionRecord>, CollectStats) {
    let mut records = Vec::new();
    let mut stats = CollectStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for ep in 0..cfg.episodes {
        let map = cfg.maps[ep % cfg.maps.len()];
        let world_cfg = WorldConfig {
            n_vehicles: cfg.n_vehicles,
            n_pedestrians: cfg.n_pedestrians,
            timeout_steps: cfg.max_steps,
            ..WorldConfig::default_for(map)
        };
        let Ok(mut world) = spawn_episode(&world_cfg, cfg.seed.wrapping_add(ep as u64 * 7919)) else {
            continue;
        };
        stats.episodes += 1;
        let ep_start = records.len();
        let mut failed = false;
        let mut prev_corridor = world.observe().ego_ctx.corridor;
        let mut transition_grace = 0u32;

        loop {
            let obs = world.observe();
            let s = build_state(&obs);
            let mut cmd = expert_command(&obs);
            if rng.random::<f64>() < cfg.epsilon {
                cmd.accel_cmd += rng.random_range(-2.0..2.0);
                cmd.steer += rng.random_range(-0.1..0.1);
                cmd = cmd.clamped();
                stats.perturbed_steps += 1;
            }
            let (_, events) = world.step_sim(cmd);
            stats.total_steps += 1;
            let obs_next = world.observe();
            let s_next = build_state(&obs_next);
            records.push(TransitionRecord {
                episode: ep as u64,
                step: obs.step,
                s,
                a: [cmd.accel_cmd, cmd.steer, 0.0],
                s_next,
                near_failure: false,
            });

            // lane geometry re-bases across corridor hops (lane counts can
            // drop at connectors); give the offset a settling window
            if obs_next.ego_ctx.corridor != prev_corridor {
                prev_corridor = obs_next.ego_ctx.corridor;
                transition_grace = 30;
            } else {
                transition_grace = transition_grace.saturating_sub(1);
            }
            let lane_crossed = transition_grace == 0
                && obs_next.ego_ctx.lane_center_offset.abs()
                    > obs_next.ego_ctx.lane_width * 0.5 + 0.3;
            if events.collision || events.offroad || lane_crossed {
                failed = true;
                break;
            }
            match world.terminated() {
                Some(Termination::Collision) => {
                    failed = true;
                    break;
                }
                Some(_) => break,
                None => {}
            }
        }

        if failed {
            stats.failure_episodes += 1;
            let window = (3.0 / world.config.dt).round() as usize;
            let lo = records.len().saturating_sub(window).max(ep_start);
            for r in records[lo..].iter_mut() {
                r.near_failure = true;
                stats.near_failure_records += 1;
            }
        }
    }
    (records, stats)
}

/// Episode sequences of raw (state, action) pairs, grouped and ordered. The
/// terminal `s_next` joins each episode with a zero action placeholder.
pub fn episodes_from_records(records: &[TransitionRecord]) -> Vec<Vec<(StructuredState, [f64; ACTION_DIM])>> {
    let mut episodes = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let ep_id = records[i].episode;
        let mut ep = Vec::new();
        while i < records.len() && records[i].episode == ep_id {
            ep.push((records[i].s, records[i].a));
            i += 1;
        }
        ep.push((records[i - 1].s_next, [0.0; ACTION_DIM]));
        episodes.push(ep);
    }
    episodes
}

/// Replace the wrapped ego yaw with a per-episode continuous angle so
/// residual targets never jump by 2*pi at the wrap boundary.
pub fn continuize_yaw(episode: &mut [(StructuredState, [f64; ACTION_DIM])]) {
    let mut prev_wrapped = match episode.first() {
        Some((s, _)) => s.0[EGO_YAW],
        None => return,
    };
    let mut cont = prev_wrapped;
    for (s, _) in episode.iter_mut() {
        cont += wrap_angle(s.0[EGO_YAW] - prev_wrapped);
        prev_wrapped = s.0[EGO_YAW];
        s.0[EGO_YAW] = cont;
    }
}

/// Normalized training episodes plus the statistics used.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub episodes: Vec<Vec<([f64; STATE_DIM], [f64; ACTION_DIM])>>,
    pub stats: NormStats,
}

/// Shift each episode into its start frame, fit (or reuse) normalization
/// stats, and normalize.
pub fn prepare(records: &[TransitionRecord], stats: Option<NormStats>) -> PreparedDataset {
    let episodes = episodes_from_records(records);
    let mut shifted: Vec<Vec<(StructuredState, [f64; ACTION_DIM])>> = Vec::with_capacity(episodes.len());
    for ep in &episodes {
        if ep.is_empty() {
            continue;
        }
        let (ox, oy) = (ep[0].0 .0[EGO_X], ep[0].0 .0[EGO_Y]);
        let mut ep2: Vec<(StructuredState, [f64; ACTION_DIM])> = ep
            .iter()
            .map(|(s, a)| {
                let mut sv = *s;
                sv.0[EGO_X] -= ox;
                sv.0[EGO_Y] -= oy;
                (sv, *a)
            })
            .collect();
        continuize_yaw(&mut ep2);
        shifted.push(ep2);
    }
    let stats = stats.unwrap_or_else(|| {
        NormStats::fit(shifted.iter().flat_map(|ep| ep.iter().map(|(s, _)| s)))
    });
    let episodes = shifted
        .iter()
        .map(|ep| ep.iter().map(|(s, a)| (stats.normalize(s).0, *a)).collect())
        .collect();
    PreparedDataset { episodes, stats }
}


#[cfg(test)]
mod diag {
    use super::*;

    #[test]
    #[ignore]
    fn expert_failure_probe() {
        for ep in 0..4u64 {
            let world_cfg = WorldConfig {
                n_vehicles: 6,
                n_pedestrians: 2,
                timeout_steps: 120,
                ..WorldConfig::default_for(MapKind::Straight)
            };
            let Ok(mut world) = spawn_episode(&world_cfg, 3u64.wrapping_add(ep * 7919)) else { continue };
            let mut prev_corridor = world.observe().ego_ctx.corridor;
            let mut grace = 0u32;
            loop {
                let obs = world.observe();
                let cmd = expert_command(&obs);
                let (_, events) = world.step_sim(cmd);
                let obs2 = world.observe();
                if obs2.ego_ctx.corridor != prev_corridor {
                    prev_corridor = obs2.ego_ctx.corridor;
                    grace = 30;
                } else {
                    grace = grace.saturating_sub(1);
                }
                let lane_crossed = grace == 0
                    && obs2.ego_ctx.lane_center_offset.abs()
                        > obs2.ego_ctx.lane_width * 0.5 + 0.3;
                if events.collision || events.offroad || lane_crossed {
                    let ego = &obs2.agents[0];
                    eprintln!(
                        "ep {ep} step {}: collision={} offroad={} lane_crossed={} offset {:.2} corridor {} grace {} ego ({:.1},{:.1}) yaw {:.2} v {:.2}",
                        obs2.step, events.collision, events.offroad, lane_crossed,
                        obs2.ego_ctx.lane_center_offset, obs2.ego_ctx.corridor, grace,
                        ego.x, ego.y, ego.yaw, ego.speed
                    );
                    break;
                }
                if world.terminated().is_some() { break; }
            }
        }
    }
}
