use super::map::MapKind;
use super::*;

fn quiet_config(map: MapKind) -> WorldConfig {
    WorldConfig { n_vehicles: 0, n_pedestrians: 0, ..WorldConfig::default_for(map) }
}

#[test]
fn spawn_is_deterministic() {
    let cfg = WorldConfig::default_for(MapKind::Grid);
    let a = spawn_episode(&cfg, 7).unwrap();
    let b = spawn_episode(&cfg, 7).unwrap();
    assert_eq!(a.agent_states(), b.agent_states());
}

#[test]
fn spawn_empty_traffic() {
    let w = spawn_episode(&quiet_config(MapKind::Straight), 1).unwrap();
    let agents = w.agent_states();
    assert_eq!(agents.len(), 1);
    assert_eq!(agents[0].kind, AgentKind::Ego);
}

#[test]
fn spawn_distinct_routes_over_seeds() {
    let cfg = WorldConfig::default_for(MapKind::Straight);
    let mut pairs = Vec::new();
    for seed in 1..=100u64 {
        let w = spawn_episode(&cfg, seed).unwrap();
        let (x, y, _, _) = w.ego_pose();
        let g = w.route.goal;
        assert!(Vec2::new(x, y).dist(g) > cfg.goal_radius, "start == goal for seed {seed}");
        pairs.push(((x * 1e6) as i64, (y * 1e6) as i64, (g.x * 1e6) as i64, (g.y * 1e6) as i64));
    }
    pairs.sort();
    pairs.dedup();
    assert_eq!(pairs.len(), 100, "start/goal pairs must be distinct across seeds");
}

#[test]
fn spawn_collision_free() {
    for seed in [1u64, 5, 9] {
        let w = spawn_episode(&WorldConfig::default_for(MapKind::Grid), seed).unwrap();
        let agents = w.agent_states();
        for i in 0..agents.len() {
            for j in i + 1..agents.len() {
                assert!(
                    !agents[i].obb().overlaps(&agents[j].obb()),
                    "seed {seed}: agents {i} and {j} overlap at spawn"
                );
            }
        }
    }
}

#[test]
fn spawn_infeasible_when_overloaded() {
    let cfg = WorldConfig {
        n_vehicles: 2000,
        ..WorldConfig::default_for(MapKind::Boulevard)
    };
    match spawn_episode(&cfg, 1) {
        Err(SimError::SpawnInfeasible(_)) => {}
        other => panic!("expected spawn failure, got {other:?}"),
    }
}

/// Straight-line integration: v=10, accel=0, steer=0 advances x by exactly 1 m.
#[test]
fn step_straight_line() {
    let mut w = spawn_episode(&quiet_config(MapKind::Straight), 3).unwrap();
    w.ego.x = 50.0;
    w.ego.y = 0.0;
    w.ego.yaw = 0.0;
    w.ego.v = 10.0;
    let x0 = w.ego.x;
    w.step_sim(ControlCommand { accel_cmd: 0.0, steer: 0.0, brake_cap: 1.0 });
    assert!((w.ego.x - (x0 + 1.0)).abs() < 1e-12);
    assert_eq!(w.ego.v, 10.0);
}

/// No reverse: v=0 with accel=-5 stays at 0.
#[test]
fn step_no_reverse() {
    let mut w = spawn_episode(&quiet_config(MapKind::Straight), 3).unwrap();
    w.ego.v = 0.0;
    w.step_sim(ControlCommand { accel_cmd: -5.0, steer: 0.0, brake_cap: 1.0 });
    assert_eq!(w.ego.v, 0.0);
}

/// v=10, accel=+2, dt=0.1 gives v=10.2 and jerk=(2 - prev_accel)/dt.
#[test]
fn step_accel_and_jerk() {
    let mut w = spawn_episode(&quiet_config(MapKind::Straight), 3).unwrap();
    w.ego.x = 50.0;
    w.ego.y = 0.0;
    w.ego.yaw = 0.0;
    w.ego.v = 10.0;
    w.ego.accel = 0.0;
    let (_, ev) = w.step_sim(ControlCommand { accel_cmd: 2.0, steer: 0.0, brake_cap: 1.0 });
    assert!((w.ego.v - 10.2).abs() < 1e-12);
    assert!((ev.jerk - 20.0).abs() < 1e-9);
}

/// Brake cap limits applied deceleration to cap * 8 m/s^2.
#[test]
fn brake_cap_enforced() {
    let mut w = spawn_episode(&quiet_config(MapKind::Straight), 3).unwrap();
    w.ego.v = 10.0;
    w.step_sim(ControlCommand { accel_cmd: -8.0, steer: 0.0, brake_cap: 0.4 });
    assert!((w.ego.v - (10.0 - 0.4 * 8.0 * 0.1)).abs() < 1e-12);
}

/// Hard brake flag and jerk from the accel sequence [0, -5] at dt=0.1.
#[test]
fn hard_brake_and_jerk_sequence() {
    let mut w = spawn_episode(&quiet_config(MapKind::Straight), 3).unwrap();
    w.ego.x = 50.0;
    w.ego.y = 0.0;
    w.ego.yaw = 0.0;
    w.ego.v = 10.0;
    let (_, e1) = w.step_sim(ControlCommand { accel_cmd: 0.0, steer: 0.0, brake_cap: 1.0 });
    assert!(!e1.hard_brake);
    let (_, e2) = w.step_sim(ControlCommand { accel_cmd: -5.0, steer: 0.0, brake_cap: 1.0 });
    assert!(e2.hard_brake);
    assert!((e2.jerk - -50.0).abs() < 1e-9);
}

#[test]
fn car_following_free_road_accelerates() {
    let a = car_following_accel(0.1, 5.0, 11.0, None, None);
    assert!(a > 0.0);
}

#[test]
fn car_following_emergency_gap() {
    let a = car_following_accel(0.1, 3.0, 11.0, Some((1.0, 0.0)), None);
    assert_eq!(a, -8.0);
}

/// Red signal 5 m ahead at 5 m/s: iterating the policy stops before the line.
#[test]
fn car_following_stops_before_line() {
    let dt = 0.1;
    let mut v: f64 = 5.0;
    let mut x = 0.0;
    for _ in 0..200 {
        let d = 5.0 - x;
        let a = car_following_accel(dt, v, 11.0, None, Some(d));
        assert!(a <= 0.0 || v < 0.05, "must brake while approaching, got {a} at v={v}");
        x += v * dt;
        v = (v + a * dt).max(0.0);
        if v < 1e-3 {
            break;
        }
    }
    assert!(v < 1e-3, "never stopped");
    assert!(x < 5.0, "stopped {x:.2} m past start, beyond the line");
}

/// Identical (config, seed, action sequence) produce identical event traces.
#[test]
fn episode_determinism() {
    let cfg = WorldConfig::default_for(MapKind::Grid);
    let run = || {
        let mut w = spawn_episode(&cfg, 11).unwrap();
        let mut log = Vec::new();
        for i in 0..300 {
            let cmd = ControlCommand {
                accel_cmd: if i % 40 < 20 { 0.8 } else { -1.2 },
                steer: 0.02 * ((i % 7) as f64 - 3.0),
                brake_cap: 1.0,
            };
            let (agents, ev) = w.step_sim(cmd);
            log.push(serde_json::to_string(&(agents, ev)).unwrap());
            if w.terminated().is_some() {
                break;
            }
        }
        log
    };
    assert_eq!(run(), run());
}

/// Background traffic alone never collides with itself over 1000 steps.
#[test]
fn background_traffic_collision_free() {
    for (kind, seed) in [(MapKind::Straight, 2u64), (MapKind::Grid, 4), (MapKind::Boulevard, 6)] {
        let cfg = WorldConfig::default_for(kind);
        let mut w = spawn_episode(&cfg, seed).unwrap();
        // park the ego far off the road so it never interferes
        w.ego.x = 5000.0;
        w.ego.y = 5000.0;
        w.ego.v = 0.0;
        for step in 0..1000 {
            w.step_sim(ControlCommand::coast());
            w.terminated = None; // park-off-route probe: ignore ego-centric termination
            let agents = w.agent_states();
            let moving: Vec<_> = agents[1..].iter().filter(|a| a.kind == AgentKind::Vehicle).collect();
            for i in 0..moving.len() {
                for j in i + 1..moving.len() {
                    assert!(
                        !moving[i].obb().overlaps(&moving[j].obb()),
                        "{kind:?} seed {seed}: background collision at step {step} between {} and {}",
                        moving[i].id,
                        moving[j].id
                    );
                }
            }
        }
    }
}

/// route_progress never decreases.
#[test]
fn route_progress_monotone() {
    let cfg = WorldConfig::default_for(MapKind::Boulevard);
    let mut w = spawn_episode(&cfg, 13).unwrap();
    let mut last = 0.0;
    for _ in 0..500 {
        let (_, ev) = w.step_sim(ControlCommand { accel_cmd: 0.5, steer: 0.05, brake_cap: 1.0 });
        assert!(ev.route_progress >= last);
        last = ev.route_progress;
        if w.terminated().is_some() {
            break;
        }
    }
}

#[test]
fn trace_roundtrip() {
    let cfg = quiet_config(MapKind::Straight);
    let mut w = spawn_episode(&cfg, 21).unwrap();
    let mut tw = trace::TraceWriter::new(Vec::new()).unwrap();
    for _ in 0..5 {
        let cmd = ControlCommand { accel_cmd: 0.3, steer: 0.0, brake_cap: 1.0 };
        let (agents, events) = w.step_sim(cmd);
        tw.write(&trace::TraceRecord {
            step: w.step_count(),
            agents,
            cmd,
            events,
            ctrl: None,
            verdict: None,
        })
        .unwrap();
    }
    let bytes = tw.into_inner();
    let recs = trace::read_trace(std::io::BufReader::new(&bytes[..])).unwrap();
    assert_eq!(recs.len(), 5);
    assert_eq!(recs[0].step, 1);
}

#[test]
fn events_obb_examples() {
    let a = AgentState {
        id: 0,
        kind: AgentKind::Ego,
        x: 0.0,
        y: 0.0,
        yaw: 0.0,
        speed: 0.0,
        accel: 0.0,
        lane_id: 0,
        half_length: VEHICLE_HALF_LEN,
        half_width: VEHICLE_HALF_WID,
    };
    let mut far = a.clone();
    far.x = 50.0;
    assert!(!a.obb().overlaps(&far.obb()));
    assert!(a.obb().overlaps(&a.clone().obb()));
}


#[test]
#[ignore]
fn dbg_bg_collision() {
    let cfg = WorldConfig::default_for(MapKind::Grid);
    let mut w = spawn_episode(&cfg, 4).unwrap();
    w.ego.x = 5000.0;
    w.ego.y = 5000.0;
    w.ego.v = 0.0;
    for step in 0..=532 {
        w.step_sim(ControlCommand::coast());
        w.terminated = None;
        if step >= 505 {
            for a in w.agent_states() {
                if a.id == 17 || a.id == 30 {
                    println!(
                        "step {} id {} lane_id {} x {:.2} y {:.2} yaw {:.2} v {:.2}",
                        step, a.id, a.lane_id, a.x, a.y, a.yaw, a.speed
                    );
                }
            }
        }
    }
}
