//! Per-episode results and benchmark aggregation.

use crate::sim::trace::TraceRecord;
use crate::sim::Termination;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub route_completion: f64,
    pub arrived: bool,
    pub collided: bool,
    pub red_light: u64,
    pub stop_sign: u64,
    pub offroad: u64,
    pub hard_brake: u64,
    pub high_jerk: u64,
    pub mean_abs_jerk: f64,
    pub steps: u64,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    /// Average route completion, percent.
    pub rc: f64,
    /// Arrival rate, percent of episodes.
    pub ar: f64,
    /// Collision rate, percent of episodes.
    pub colr: f64,
    /// Mean red-light violations per route.
    pub redl: f64,
    /// Mean stop-sign violations per route.
    pub stop: f64,
    /// Mean offroad events per route.
    pub offr: f64,
    /// Mean hard-brake events per route.
    pub hb: f64,
    /// Mean high-jerk events per route.
    pub hj: f64,
    /// Mean over episodes of mean absolute jerk.
    pub maj: f64,
    pub n_episodes: usize,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty result list")]
    Empty,
}

/// Order-independent aggregation over episode results.
pub fn compute_metrics(results: &[EpisodeResult]) -> Result<BenchmarkSummary, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(|r| f(r)).sum::<f64>() / n;
    Ok(BenchmarkSummary {
        rc: mean(&|r| r.route_completion) * 100.0,
        ar: mean(&|r| r.arrived as u8 as f64) * 100.0,
        colr: mean(&|r| r.collided as u8 as f64) * 100.0,
        redl: mean(&|r| r.red_light as f64),
        stop: mean(&|r| r.stop_sign as f64),
        offr: mean(&|r| r.offroad as f64),
        hb: mean(&|r| r.hard_brake as f64),
        hj: mean(&|r| r.high_jerk as f64),
        maj: mean(&|r| r.mean_abs_jerk),
        n_episodes: results.len(),
        config_hash: String::new(),
        seeds: Vec::new(),
    })
}

/// Rebuild an episode result from its raw trace, independently of the
/// streaming aggregation.
pub fn result_from_trace(records: &[TraceRecord], high_jerk_thresh: f64) -> EpisodeResult {
    let mut out = EpisodeResult {
        route_completion: 0.0,
        arrived: false,
        collided: false,
        red_light: 0,
        stop_sign: 0,
        offroad: 0,
        hard_brake: 0,
        high_jerk: 0,
        mean_abs_jerk: 0.0,
        steps: records.len() as u64,
        termination: Termination::Timeout,
    };
    let mut jerk_sum = 0.0;
    for r in records {
        let e = &r.events;
        out.route_completion = out.route_completion.max(e.route_progress);
        out.collided |= e.collision;
        out.arrived |= e.goal_reached;
        out.red_light += e.red_light_violation as u64;
        out.stop_sign += e.stop_sign_violation as u64;
        out.offroad += e.offroad as u64;
        out.hard_brake += e.hard_brake as u64;
        out.high_jerk += (e.jerk.abs() >= high_jerk_thresh) as u64;
        jerk_sum += e.jerk.abs();
    }
    if !records.is_empty() {
        out.mean_abs_jerk = jerk_sum / records.len() as f64;
    }
    if out.collided {
        out.termination = Termination::Collision;
        out.arrived = false;
    } else if out.arrived {
        out.termination = Termination::Goal;
        out.route_completion = 1.0;
    }
    out
}

/// Plain-text aligned table for a summary.
pub fn summary_table(name: &str, s: &BenchmarkSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>8}\n",
        "variant", "RC%", "AR%", "ColR%", "RedL", "Stop", "OffR", "HB", "HJ", "MAJ"
    ));
    out.push_str(&format!(
        "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>7.3} {:>7.3} {:>7.3} {:>8.2} {:>8.2} {:>8.3}\n",
        name, s.rc, s.ar, s.colr, s.redl, s.stop, s.offr, s.hb, s.hj, s.maj
    ));
    out.push_str(&format!(
        "episodes {}  config {}  seeds {}..{}\n",
        s.n_episodes,
        s.config_hash,
        s.seeds.first().copied().unwrap_or(0),
        s.seeds.last().copied().unwrap_or(0)
    ));
    out
}
