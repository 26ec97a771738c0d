//! Built-in road layouts.
//!
//! A map is a set of corridors: a corridor carries a centerline polyline,
//! `n_lanes` parallel lanes of equal width, a speed limit, successor links,
//! and optional stop line / crosswalk annotations. Lane index 0 is the
//! rightmost lane; lane centers sit at signed lateral offsets from the
//! corridor centerline (positive = left of travel).

use crate::geom::{Polyline, Vec2};
use serde::{Deserialize, Serialize};

pub type CorridorId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopControl {
    Signal { group: usize },
    StopSign,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopLine {
    /// Arclength position along the corridor centerline.
    pub s: f64,
    pub control: StopControl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Crosswalk {
    /// Arclength position along the corridor centerline.
    pub s: f64,
    /// Distance at which an approaching vehicle triggers the crossing.
    pub trigger_dist: f64,
}

#[derive(Debug, Clone)]
pub struct Corridor {
    pub centerline: Polyline,
    pub n_lanes: usize,
    pub lane_width: f64,
    pub speed_limit: f64,
    pub successors: Vec<CorridorId>,
    pub stop_line: Option<StopLine>,
    pub crosswalks: Vec<Crosswalk>,
}

impl Corridor {
    pub fn drivable_half_width(&self) -> f64 {
        self.n_lanes as f64 * self.lane_width / 2.0
    }

    /// Signed lateral offset of a lane center (positive left).
    pub fn lane_center_offset(&self, lane: usize) -> f64 {
        (lane as f64 - (self.n_lanes as f64 - 1.0) / 2.0) * self.lane_width
    }

    /// Lane index whose center is nearest to the signed lateral offset.
    pub fn lane_at_offset(&self, lat: f64) -> usize {
        let mut best = 0usize;
        let mut bd = f64::INFINITY;
        for lane in 0..self.n_lanes {
            let d = (self.lane_center_offset(lane) - lat).abs();
            if d < bd {
                bd = d;
                best = lane;
            }
        }
        best
    }

    pub fn pose_at(&self, s: f64, lat: f64) -> (Vec2, f64) {
        let c = self.centerline.point_at(s);
        let h = self.centerline.heading_at(s);
        let n = Vec2::unit_from_angle(h).left();
        (c.add(n.scale(lat)), h)
    }
}

/// Fixed-cycle signal timing shared by every stop line in a group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalTiming {
    pub green: f64,
    pub yellow: f64,
    pub red: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalState {
    Green,
    Yellow,
    Red,
}

impl SignalTiming {
    pub fn state_at(&self, t: f64) -> SignalState {
        let cycle = self.green + self.yellow + self.red;
        let ph = (t + self.offset).rem_euclid(cycle);
        if ph < self.green {
            SignalState::Green
        } else if ph < self.green + self.yellow {
            SignalState::Yellow
        } else {
            SignalState::Red
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapKind {
    /// Two-way straight road closed into a stadium loop, stop signs mid-block.
    Straight,
    /// Four-way signalized intersection with circulating arms.
    Grid,
    /// One-way curved ring with a stop-sign crossing.
    Boulevard,
}

impl MapKind {
    pub fn parse(name: &str) -> Option<MapKind> {
        match name {
            "straight" => Some(MapKind::Straight),
            "grid" => Some(MapKind::Grid),
            "boulevard" => Some(MapKind::Boulevard),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Straight => "straight",
            MapKind::Grid => "grid",
            MapKind::Boulevard => "boulevard",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LaneMap {
    pub kind: MapKind,
    pub corridors: Vec<Corridor>,
    pub signals: Vec<SignalTiming>,
    /// Corridors suitable for spawning and route starts (excludes connectors).
    pub spawnable: Vec<CorridorId>,
}

impl LaneMap {
    pub fn build(kind: MapKind) -> LaneMap {
        match kind {
            MapKind::Straight => straight_map(),
            MapKind::Grid => grid_map(),
            MapKind::Boulevard => boulevard_map(),
        }
    }

    pub fn corridor(&self, id: CorridorId) -> &Corridor {
        &self.corridors[id]
    }

    /// Nearest corridor by centerline distance, preferring heading agreement.
    /// Returns (corridor, arclength, signed lateral offset).
    pub fn locate(&self, p: Vec2, yaw: f64) -> (CorridorId, f64, f64) {
        let mut best = (0usize, 0.0, 0.0, f64::INFINITY);
        for (id, c) in self.corridors.iter().enumerate() {
            let (s, lat, dist) = c.centerline.project_full(p);
            let h = c.centerline.heading_at(s);
            let align = crate::geom::wrap_angle(h - yaw).abs();
            // penalize opposing-direction corridors so two-way roads resolve
            let score = dist + if align > std::f64::consts::FRAC_PI_2 { 50.0 } else { 0.0 };
            if score < best.3 {
                best = (id, s, lat, score);
            }
        }
        (best.0, best.1, best.2)
    }
}

fn line(points: &[(f64, f64)]) -> Polyline {
    Polyline::new(points.iter().map(|&(x, y)| Vec2::new(x, y)).collect())
}

/// Sampled circular arc from `a0` to `a1` radians around `center`.
fn arc(center: (f64, f64), radius: f64, a0: f64, a1: f64) -> Polyline {
    let n = 24usize;
    let mut pts = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = a0 + (a1 - a0) * i as f64 / n as f64;
        pts.push(Vec2::new(center.0 + radius * t.cos(), center.1 + radius * t.sin()));
    }
    Polyline::new(pts)
}

fn corridor(centerline: Polyline, n_lanes: usize, lane_width: f64, speed_limit: f64) -> Corridor {
    Corridor {
        centerline,
        n_lanes,
        lane_width,
        speed_limit,
        successors: Vec::new(),
        stop_line: None,
        crosswalks: Vec::new(),
    }
}

/// Stadium loop: 700 m eastbound + westbound straights joined by U-turn arcs.
/// Stop signs with crosswalks mid-block in both directions.
fn straight_map() -> LaneMap {
    const LEN: f64 = 700.0;
    const SEP: f64 = 10.5; // centerline separation between directions
    const W: f64 = 3.5;
    let mut cs = Vec::new();

    // 0: eastbound, 1: westbound
    cs.push(corridor(line(&[(0.0, 0.0), (LEN, 0.0)]), 2, W, 11.0));
    cs.push(corridor(line(&[(LEN, SEP), (0.0, SEP)]), 2, W, 11.0));
    // 2: east U-turn (from end of 0 to start of 1), 3: west U-turn
    let r = SEP / 2.0;
    cs.push(corridor(arc((LEN, r), r, -std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2), 1, 4.5, 4.0));
    cs.push(corridor(arc((0.0, r), r, std::f64::consts::FRAC_PI_2, 3.0 * std::f64::consts::FRAC_PI_2), 1, 4.5, 4.0));

    cs[0].successors = vec![2];
    cs[2].successors = vec![1];
    cs[1].successors = vec![3];
    cs[3].successors = vec![0];

    for id in [0usize, 1] {
        cs[id].stop_line = Some(StopLine { s: 350.0, control: StopControl::StopSign });
        cs[id].crosswalks = vec![Crosswalk { s: 354.0, trigger_dist: 18.0 }];
    }

    LaneMap { kind: MapKind::Straight, corridors: cs, signals: Vec::new(), spawnable: vec![0, 1] }
}

/// Four-way signalized intersection. Right-hand traffic: each arm has an
/// inbound and an outbound corridor offset 5.25 m from the axis; straight
/// connectors cross the 24 m center box; U-turn arcs at the outer ends keep
/// traffic circulating. Signal group 0 = north/south, group 1 = east/west.
fn grid_map() -> LaneMap {
    const ARM: f64 = 232.0; // inbound/outbound length
    const BOX: f64 = 12.0; // half-size of the center box
    const OFF: f64 = 5.25;
    const W: f64 = 3.5;
    const OUTER: f64 = BOX + ARM;
    let mut cs = Vec::new();

    // 0..8: in/out corridors per arm. Naming by travel direction.
    // 0 north-in (heading +y), 1 north-out
    cs.push(corridor(line(&[(OFF, -OUTER), (OFF, -BOX)]), 2, W, 11.0));
    cs.push(corridor(line(&[(OFF, BOX), (OFF, OUTER)]), 2, W, 11.0));
    // 2 south-in (heading -y), 3 south-out
    cs.push(corridor(line(&[(-OFF, OUTER), (-OFF, BOX)]), 2, W, 11.0));
    cs.push(corridor(line(&[(-OFF, -BOX), (-OFF, -OUTER)]), 2, W, 11.0));
    // 4 east-in (heading +x), 5 east-out
    cs.push(corridor(line(&[(-OUTER, -OFF), (-BOX, -OFF)]), 2, W, 11.0));
    cs.push(corridor(line(&[(BOX, -OFF), (OUTER, -OFF)]), 2, W, 11.0));
    // 6 west-in (heading -x), 7 west-out
    cs.push(corridor(line(&[(OUTER, OFF), (BOX, OFF)]), 2, W, 11.0));
    cs.push(corridor(line(&[(-BOX, OFF), (-OUTER, OFF)]), 2, W, 11.0));

    // 8..12: straight connectors through the box
    cs.push(corridor(line(&[(OFF, -BOX), (OFF, BOX)]), 2, W, 8.0)); // 8: north
    cs.push(corridor(line(&[(-OFF, BOX), (-OFF, -BOX)]), 2, W, 8.0)); // 9: south
    cs.push(corridor(line(&[(-BOX, -OFF), (BOX, -OFF)]), 2, W, 8.0)); // 10: east
    cs.push(corridor(line(&[(BOX, OFF), (-BOX, OFF)]), 2, W, 8.0)); // 11: west

    // 12..16: U-turn arcs at the outer ends
    cs.push(corridor(arc((0.0, OUTER), OFF, 0.0, std::f64::consts::PI), 1, 4.5, 4.0)); // 12: N out->S in
    cs.push(corridor(arc((0.0, -OUTER), OFF, std::f64::consts::PI, 2.0 * std::f64::consts::PI), 1, 4.5, 4.0)); // 13: S out->N in
    cs.push(
        corridor(arc((OUTER, 0.0), OFF, -std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2), 1, 4.5, 4.0), // 14: E out->W in
    );
    cs.push(
        corridor(arc((-OUTER, 0.0), OFF, std::f64::consts::FRAC_PI_2, 3.0 * std::f64::consts::FRAC_PI_2), 1, 4.5, 4.0), // 15: W out->E in
    );

    cs[0].successors = vec![8];
    cs[8].successors = vec![1];
    cs[1].successors = vec![12];
    cs[12].successors = vec![2];
    cs[2].successors = vec![9];
    cs[9].successors = vec![3];
    cs[3].successors = vec![13];
    cs[13].successors = vec![0];
    cs[4].successors = vec![10];
    cs[10].successors = vec![5];
    cs[5].successors = vec![14];
    cs[14].successors = vec![6];
    cs[6].successors = vec![11];
    cs[11].successors = vec![7];
    cs[7].successors = vec![15];
    cs[15].successors = vec![4];

    // stop lines 2 m before the box on inbound corridors; crosswalks just after
    for (id, group) in [(0usize, 0usize), (2, 0), (4, 1), (6, 1)] {
        let s = cs[id].centerline.length() - 2.0;
        cs[id].stop_line = Some(StopLine { s, control: StopControl::Signal { group } });
        cs[id].crosswalks = vec![Crosswalk { s: s - 14.0, trigger_dist: 18.0 }];
    }

    // complementary phases with a 1 s all-red clearance on each switch
    let signals = vec![
        SignalTiming { green: 16.0, yellow: 3.0, red: 21.0, offset: 0.0 },
        SignalTiming { green: 16.0, yellow: 3.0, red: 21.0, offset: 20.0 },
    ];

    LaneMap { kind: MapKind::Grid, corridors: cs, signals, spawnable: vec![0, 1, 2, 3, 4, 5, 6, 7] }
}

/// One-way ring boulevard (radius 85 m) split into four arc corridors, with a
/// stop sign and two crosswalks.
fn boulevard_map() -> LaneMap {
    const R: f64 = 85.0;
    const W: f64 = 3.5;
    let q = std::f64::consts::FRAC_PI_2;
    let mut cs = Vec::new();
    for i in 0..4 {
        cs.push(corridor(arc((0.0, 0.0), R, i as f64 * q, (i + 1) as f64 * q), 2, W, 9.0));
    }
    for i in 0..4 {
        cs[i].successors = vec![(i + 1) % 4];
    }
    let l0 = cs[0].centerline.length();
    cs[0].stop_line = Some(StopLine { s: l0 - 4.0, control: StopControl::StopSign });
    cs[0].crosswalks = vec![Crosswalk { s: l0 - 1.0, trigger_dist: 16.0 }];
    cs[2].crosswalks = vec![Crosswalk { s: cs[2].centerline.length() / 2.0, trigger_dist: 16.0 }];

    LaneMap { kind: MapKind::Boulevard, corridors: cs, signals: Vec::new(), spawnable: vec![0, 1, 2, 3] }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_cycle_states() {
        let t = SignalTiming { green: 16.0, yellow: 3.0, red: 21.0, offset: 0.0 };
        assert_eq!(t.state_at(0.0), SignalState::Green);
        assert_eq!(t.state_at(15.9), SignalState::Green);
        assert_eq!(t.state_at(17.0), SignalState::Yellow);
        assert_eq!(t.state_at(25.0), SignalState::Red);
        assert_eq!(t.state_at(40.0), SignalState::Green);
    }

    #[test]
    fn grid_phases_never_green_together() {
        let m = LaneMap::build(MapKind::Grid);
        let mut t = 0.0;
        while t < 120.0 {
            let ns = m.signals[0].state_at(t);
            let ew = m.signals[1].state_at(t);
            assert!(
                !(ns != SignalState::Red && ew != SignalState::Red),
                "conflicting phases at t={t}: {ns:?} {ew:?}"
            );
            t += 0.1;
        }
    }

    #[test]
    fn maps_are_connected_loops() {
        for kind in [MapKind::Straight, MapKind::Grid, MapKind::Boulevard] {
            let m = LaneMap::build(kind);
            for (id, c) in m.corridors.iter().enumerate() {
                assert!(!c.successors.is_empty(), "{:?} corridor {id} has no successor", kind);
                let end = c.centerline.point_at(c.centerline.length());
                for &n in &c.successors {
                    let start = m.corridors[n].centerline.point_at(0.0);
                    assert!(
                        end.dist(start) < 1.5,
                        "{:?}: corridor {id} end {:?} far from successor {n} start {:?}",
                        kind,
                        end,
                        start
                    );
                }
            }
        }
    }

    #[test]
    fn lane_offsets() {
        let m = LaneMap::build(MapKind::Straight);
        let c = m.corridor(0);
        assert!((c.lane_center_offset(0) - -1.75).abs() < 1e-12);
        assert!((c.lane_center_offset(1) - 1.75).abs() < 1e-12);
        assert_eq!(c.lane_at_offset(-1.0), 0);
        assert_eq!(c.lane_at_offset(1.0), 1);
    }
}
