//! Fixed-layout structured state shared by the world model, safety scorer,
//! and control backend. Every consumer reads the same offsets; the layout is
//! versioned and persisted artifacts refuse to load on a mismatch.
//!
//! Layout (71 values):
//! - ego block (7): x, y, yaw, speed, accel, lane_center_offset, route_progress
//! - road block (8): speed_limit, signal one-hot (green/yellow/red),
//!   dist_to_stop_line (capped at 100 m), dist_left_boundary,
//!   dist_right_boundary, route_heading_error
//! - social block (48): up to 8 nearest neighbors within 50 m, each
//!   [rel_x, rel_y, rel_vx, rel_vy, rel_yaw, is_pedestrian] in the ego frame
//! - presence mask (8)
//!
//! Stop signs are folded into the signal one-hot: red until the mandated
//! stop is performed, green afterwards.

use crate::geom::{wrap_angle, Vec2};
use crate::sim::map::SignalState;
use crate::sim::{AgentKind, Observation, PED_HALF, VEHICLE_HALF_LEN, VEHICLE_HALF_WID};
use serde::de::{SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::io::{BufRead, Write};
use thiserror::Error;

pub const STATE_DIM: usize = 71;
pub const N_NEIGHBORS: usize = 8;
pub const NEIGHBOR_FEATS: usize = 6;
pub const NEIGHBOR_RADIUS: f64 = 50.0;
pub const STOP_LINE_CAP: f64 = 100.0;
pub const LAYOUT_VERSION: &str = "ria-state-v1-71";

// field offsets
pub const EGO_X: usize = 0;
pub const EGO_Y: usize = 1;
pub const EGO_YAW: usize = 2;
pub const EGO_SPEED: usize = 3;
pub const EGO_ACCEL: usize = 4;
pub const LANE_OFFSET: usize = 5;
pub const ROUTE_PROGRESS: usize = 6;
pub const SPEED_LIMIT: usize = 7;
pub const SIG_GREEN: usize = 8;
pub const SIG_YELLOW: usize = 9;
pub const SIG_RED: usize = 10;
pub const DIST_STOP_LINE: usize = 11;
pub const DIST_LEFT: usize = 12;
pub const DIST_RIGHT: usize = 13;
pub const ROUTE_HEADING_ERR: usize = 14;
pub const SOCIAL: usize = 15;
pub const MASK: usize = SOCIAL + N_NEIGHBORS * NEIGHBOR_FEATS; // 63

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuredState(pub [f64; STATE_DIM]);

impl Default for StructuredState {
    fn default() -> Self {
        Self([0.0; STATE_DIM])
    }
}

impl Serialize for StructuredState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter())
    }
}

impl<'de> Deserialize<'de> for StructuredState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = StructuredState;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "a sequence of {STATE_DIM} floats")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
                let mut out = [0.0; STATE_DIM];
                for (i, slot) in out.iter_mut().enumerate() {
                    *slot = seq
                        .next_element()?
                        .ok_or_else(|| serde::de::Error::invalid_length(i, &self))?;
                }
                if seq.next_element::<f64>()?.is_some() {
                    return Err(serde::de::Error::custom("state vector too long"));
                }
                Ok(StructuredState(out))
            }
        }
        d.deserialize_seq(V)
    }
}

/// View over one neighbor slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub rel_x: f64,
    pub rel_y: f64,
    pub rel_vx: f64,
    pub rel_vy: f64,
    pub rel_yaw: f64,
    pub is_pedestrian: bool,
}

impl StructuredState {
    pub fn ego_speed(&self) -> f64 {
        self.0[EGO_SPEED]
    }

    pub fn speed_limit(&self) -> f64 {
        self.0[SPEED_LIMIT]
    }

    pub fn lane_offset(&self) -> f64 {
        self.0[LANE_OFFSET]
    }

    pub fn signal(&self) -> SignalState {
        let g = self.0[SIG_GREEN];
        let y = self.0[SIG_YELLOW];
        let r = self.0[SIG_RED];
        if r >= g && r >= y {
            SignalState::Red
        } else if y >= g {
            SignalState::Yellow
        } else {
            SignalState::Green
        }
    }

    pub fn mask(&self, slot: usize) -> bool {
        self.0[MASK + slot] > 0.5
    }

    pub fn neighbor(&self, slot: usize) -> Option<Neighbor> {
        if !self.mask(slot) {
            return None;
        }
        let o = SOCIAL + slot * NEIGHBOR_FEATS;
        Some(Neighbor {
            rel_x: self.0[o],
            rel_y: self.0[o + 1],
            rel_vx: self.0[o + 2],
            rel_vy: self.0[o + 3],
            rel_yaw: self.0[o + 4],
            is_pedestrian: self.0[o + 5] > 0.5,
        })
    }

    pub fn neighbors(&self) -> impl Iterator<Item = Neighbor> + '_ {
        (0..N_NEIGHBORS).filter_map(|i| self.neighbor(i))
    }

    /// Nearest object ahead in the ego lane corridor:
    /// (bumper gap, closing speed, is_pedestrian). Closing > 0 means the gap
    /// is shrinking.
    pub fn front_object(&self) -> Option<(f64, f64, bool)> {
        let mut best: Option<(f64, f64, bool)> = None;
        for n in self.neighbors() {
            if n.rel_x <= 0.0 || n.rel_y.abs() > 2.0 {
                continue;
            }
            let other_half = if n.is_pedestrian { PED_HALF } else { VEHICLE_HALF_LEN };
            let gap = n.rel_x - (VEHICLE_HALF_LEN + other_half);
            if best.map_or(true, |(g, _, _)| gap < g) {
                best = Some((gap, -n.rel_vx, n.is_pedestrian));
            }
        }
        best
    }

    /// Directional box distance to a neighbor: center distance minus both
    /// agents' half-extents projected along the center-to-center line.
    pub fn neighbor_distance(n: &Neighbor) -> f64 {
        let dist = (n.rel_x * n.rel_x + n.rel_y * n.rel_y).sqrt();
        if dist < 1e-9 {
            return -(VEHICLE_HALF_LEN + VEHICLE_HALF_WID);
        }
        let phi_ego = n.rel_y.atan2(n.rel_x);
        let ego_ext = VEHICLE_HALF_LEN * phi_ego.cos().abs() + VEHICLE_HALF_WID * phi_ego.sin().abs();
        let (hl, hw) = if n.is_pedestrian { (PED_HALF, PED_HALF) } else { (VEHICLE_HALF_LEN, VEHICLE_HALF_WID) };
        let phi_n = wrap_angle(phi_ego - n.rel_yaw);
        let n_ext = hl * phi_n.cos().abs() + hw * phi_n.sin().abs();
        dist - ego_ext - n_ext
    }

    /// Minimum box distance over unmasked neighbors, +inf when none.
    pub fn min_neighbor_distance(&self) -> f64 {
        self.neighbors().map(|n| Self::neighbor_distance(&n)).fold(f64::INFINITY, f64::min)
    }
}

/// Build the structured state from a simulator observation. Relative social
/// quantities are expressed in the ego frame; neighbors are the up-to-8
/// nearest agents within 50 m, sorted by ascending distance; masked slots are
/// exactly zero.
pub fn build_state(obs: &Observation) -> StructuredState {
    let ego = &obs.agents[0];
    let ctx = &obs.ego_ctx;
    let mut s = [0.0; STATE_DIM];

    s[EGO_X] = ego.x;
    s[EGO_Y] = ego.y;
    s[EGO_YAW] = ego.yaw;
    s[EGO_SPEED] = ego.speed;
    s[EGO_ACCEL] = ego.accel;
    s[LANE_OFFSET] = ctx.lane_center_offset;
    s[ROUTE_PROGRESS] = ctx.route_progress;

    s[SPEED_LIMIT] = ctx.speed_limit;
    match ctx.signal_state {
        SignalState::Green => s[SIG_GREEN] = 1.0,
        SignalState::Yellow => s[SIG_YELLOW] = 1.0,
        SignalState::Red => s[SIG_RED] = 1.0,
    }
    s[DIST_STOP_LINE] = ctx.dist_stop_line.min(STOP_LINE_CAP);
    s[DIST_LEFT] = ctx.dist_left_boundary;
    s[DIST_RIGHT] = ctx.dist_right_boundary;
    s[ROUTE_HEADING_ERR] = ctx.route_heading_error;

    let ego_pos = Vec2::new(ego.x, ego.y);
    let ego_vel = Vec2::unit_from_angle(ego.yaw).scale(ego.speed);
    let mut nearby: Vec<(f64, &crate::sim::AgentState)> = obs.agents[1..]
        .iter()
        .filter_map(|a| {
            let d = ego_pos.dist(Vec2::new(a.x, a.y));
            (d <= NEIGHBOR_RADIUS).then_some((d, a))
        })
        .collect();
    nearby.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    for (slot, (_, a)) in nearby.iter().take(N_NEIGHBORS).enumerate() {
        let rel = Vec2::new(a.x - ego.x, a.y - ego.y).rot(-ego.yaw);
        let vel = Vec2::unit_from_angle(a.yaw).scale(a.speed);
        let rel_v = vel.sub(ego_vel).rot(-ego.yaw);
        let o = SOCIAL + slot * NEIGHBOR_FEATS;
        s[o] = rel.x;
        s[o + 1] = rel.y;
        s[o + 2] = rel_v.x;
        s[o + 3] = rel_v.y;
        s[o + 4] = wrap_angle(a.yaw - ego.yaw);
        s[o + 5] = if a.kind == AgentKind::Pedestrian { 1.0 } else { 0.0 };
        s[MASK + slot] = 1.0;
    }

    StructuredState(s)
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed stats file: {0}")]
    Malformed(String),
    #[error("state layout mismatch: file has {found}, expected {expected}")]
    LayoutMismatch { found: String, expected: String },
}

/// Per-feature affine normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

pub const NORM_HEADER: &str = "RIA-NORM v1";
const SCALE_FLOOR: f64 = 1e-6;

/// Per-feature scale bounds (lo, hi). The scale doubles as the implicit
/// per-feature weight of the squared prediction loss, so features whose raw
/// spread dwarfs their per-step dynamics (positions, stop-line distance) are
/// capped, and features whose commanded jumps dwarf their spread (accel) are
/// floored. Bounds keep one-step residual targets at comparable magnitudes.
fn scale_bounds(i: usize) -> (f64, f64) {
    if (SOCIAL..MASK).contains(&i) {
        // distance-sorted far slots churn between agents step to step; the
        // resulting jump noise would otherwise dominate prediction training
        let slot = (i - SOCIAL) / NEIGHBOR_FEATS;
        return match slot {
            0 | 1 => (SCALE_FLOOR, f64::INFINITY),
            2 | 3 => (8.0, f64::INFINITY),
            _ => (20.0, f64::INFINITY),
        };
    }
    if i >= MASK {
        return (0.35, f64::INFINITY);
    }
    match i {
        // absolute position carries no information the model needs as an
        // input, so a tight scale only boosts its residual weighting
        EGO_X | EGO_Y => (SCALE_FLOOR, 1.5),
        // commanded-accel jumps dwarf the accel spread
        EGO_ACCEL => (3.0, f64::INFINITY),
        // the next-line distance teleports on every crossing
        DIST_STOP_LINE => (30.0, f64::INFINITY),
        SIG_GREEN | SIG_YELLOW | SIG_RED => (0.5, f64::INFINITY),
        _ => (SCALE_FLOOR, f64::INFINITY),
    }
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: vec![0.0; STATE_DIM], scale: vec![1.0; STATE_DIM] }
    }

    /// Fit mean and standard deviation per feature. Masked-out neighbor slots
    /// are zero by contract and simply contribute zeros.
    pub fn fit<'a>(states: impl Iterator<Item = &'a StructuredState> + Clone) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; STATE_DIM];
        for s in states.clone() {
            n += 1;
            for i in 0..STATE_DIM {
                mean[i] += s.0[i];
            }
        }
        let n = n.max(1) as f64;
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; STATE_DIM];
        for s in states {
            for i in 0..STATE_DIM {
                let d = s.0[i] - mean[i];
                var[i] += d * d;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (lo, hi) = scale_bounds(i);
                (v / n).sqrt().clamp(lo.max(SCALE_FLOOR), hi)
            })
            .collect();
        Self { mean, scale }
    }

    pub fn normalize(&self, state: &StructuredState) -> StructuredState {
        let mut out = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            out[i] = (state.0[i] - self.mean[i]) / self.scale[i];
        }
        // masked neighbor slots stay exactly zero
        for slot in 0..N_NEIGHBORS {
            if state.0[MASK + slot] <= 0.5 {
                let o = SOCIAL + slot * NEIGHBOR_FEATS;
                for v in out[o..o + NEIGHBOR_FEATS].iter_mut() {
                    *v = 0.0;
                }
                out[MASK + slot] = 0.0;
            } else {
                out[MASK + slot] = 1.0;
            }
        }
        StructuredState(out)
    }

    pub fn denormalize(&self, state: &StructuredState) -> StructuredState {
        let mut out = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            out[i] = state.0[i] * self.scale[i] + self.mean[i];
        }
        for slot in 0..N_NEIGHBORS {
            if state.0[MASK + slot] <= 0.5 {
                let o = SOCIAL + slot * NEIGHBOR_FEATS;
                for v in out[o..o + NEIGHBOR_FEATS].iter_mut() {
                    *v = 0.0;
                }
                out[MASK + slot] = 0.0;
            } else {
                out[MASK + slot] = 1.0;
            }
        }
        StructuredState(out)
    }

    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{NORM_HEADER}")?;
        writeln!(w, "layout {LAYOUT_VERSION}")?;
        for (name, vals) in [("mean", &self.mean), ("scale", &self.scale)] {
            let joined: Vec<String> = vals.iter().map(|v| format!("{:x}", v.to_bits())).collect();
            writeln!(w, "{name} {}", joined.join(" "))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, StatsError> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header != NORM_HEADER {
            return Err(StatsError::Malformed(format!("bad header {header:?}")));
        }
        let layout = lines.next().transpose()?.unwrap_or_default();
        let found = layout.strip_prefix("layout ").unwrap_or("").to_string();
        if found != LAYOUT_VERSION {
            return Err(StatsError::LayoutMismatch { found, expected: LAYOUT_VERSION.into() });
        }
        let mut mean = None;
        let mut scale = None;
        for line in lines {
            let line = line?;
            let mut it = line.splitn(2, ' ');
            let key = it.next().unwrap_or("");
            let vals: Result<Vec<f64>, _> = it
                .next()
                .unwrap_or("")
                .split_whitespace()
                .map(|t| u64::from_str_radix(t, 16).map(f64::from_bits))
                .collect();
            let vals = vals.map_err(|e| StatsError::Malformed(e.to_string()))?;
            if vals.len() != STATE_DIM {
                return Err(StatsError::Malformed(format!("{key} has {} values", vals.len())));
            }
            match key {
                "mean" => mean = Some(vals),
                "scale" => scale = Some(vals),
                other => return Err(StatsError::Malformed(format!("unknown key {other}"))),
            }
        }
        match (mean, scale) {
            (Some(mean), Some(scale)) => Ok(Self { mean, scale }),
            _ => Err(StatsError::Malformed("missing mean or scale".into())),
        }
    }
}
