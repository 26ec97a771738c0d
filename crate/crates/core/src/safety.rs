//! The Imagine-stage scorer and guard rails: rollout penalty cost, safest-
//! candidate selection, the pre-rollout hard-risk short circuit, the
//! post-scoring override, and the feedback summary.

use crate::reasoner::{ActionTemplate, SubAction};
use crate::state::StructuredState;
use crate::wm::Rollout;
use serde::{Deserialize, Serialize};

pub const CRITICAL_DISTANCE: f64 = 3.0;
pub const CRITICAL_PENALTY: f64 = 100.0;
pub const DISTANCE_MARGIN: f64 = 8.0;
pub const LANE_LIMIT_LC: f64 = 2.8;
pub const LANE_LIMIT_KEEP: f64 = 1.5;
pub const HARD_GAP: f64 = 3.0;
pub const HARD_TTC: f64 = 1.5;

/// Decomposed rollout penalty. `total` is always the exact sum of the parts;
/// the safety score is its negation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutCost {
    pub p_crit: f64,
    pub p_dist: f64,
    pub p_lane: f64,
    pub total: f64,
    pub d_min: f64,
    pub l_max: f64,
}

impl RolloutCost {
    pub fn score(&self) -> f64 {
        -self.total
    }
}

/// Penalty from the summary quantities:
/// p_crit = 100 * [d_min < 3], p_dist = max(0, 8 - d_min)^2,
/// p_lane = 2 * max(0, l_max - 2.8) on lane changes, else 8 * max(0, l_max - 1.5).
pub fn cost_from_quantities(d_min: f64, l_max: f64, is_lane_change: bool) -> RolloutCost {
    let p_crit = if d_min < CRITICAL_DISTANCE { CRITICAL_PENALTY } else { 0.0 };
    let shortfall = (DISTANCE_MARGIN - d_min).max(0.0);
    let p_dist = shortfall * shortfall;
    let p_lane = if is_lane_change {
        2.0 * (l_max - LANE_LIMIT_LC).max(0.0)
    } else {
        8.0 * (l_max - LANE_LIMIT_KEEP).max(0.0)
    };
    RolloutCost { p_crit, p_dist, p_lane, total: p_crit + p_dist + p_lane, d_min, l_max }
}

/// Penalty over a rollout. Empty rollouts are a contract violation; callers
/// route those through the fallback path instead.
pub fn rollout_cost(rollout: &Rollout, is_lane_change: bool) -> RolloutCost {
    assert!(!rollout.states.is_empty(), "rollout_cost on an empty rollout");
    cost_from_quantities(rollout.min_distance(), rollout.max_lateral(), is_lane_change)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    None,
    SingleCandidate,
    RolloutFailure,
    HardPrecheck,
    PostOverride,
}

impl FallbackReason {
    pub fn name(self) -> &'static str {
        match self {
            FallbackReason::None => "none",
            FallbackReason::SingleCandidate => "single_candidate",
            FallbackReason::RolloutFailure => "rollout_failure",
            FallbackReason::HardPrecheck => "hard_precheck",
            FallbackReason::PostOverride => "post_override",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub selected: SubAction,
    /// Per-candidate cost; failed rollouts hold None.
    pub costs: Vec<Option<RolloutCost>>,
    pub override_applied: bool,
    pub fallback_reason: FallbackReason,
}

impl Verdict {
    /// Best (maximum) candidate score, when any candidate was scored.
    pub fn best_score(&self) -> Option<f64> {
        self.costs.iter().flatten().map(|c| c.score()).fold(None, |acc, s| {
            Some(acc.map_or(s, |a: f64| a.max(s)))
        })
    }
}

/// Pick the executable candidate. A single candidate is used directly; any
/// rollout failure falls back to the middle-intensity candidate; otherwise
/// the minimum total cost wins, ties broken toward the lower intensity
/// (earlier group position).
pub fn select_safest(
    candidates: &[SubAction],
    rollouts: &[Option<Rollout>],
    is_lane_change: bool,
) -> Verdict {
    assert!(!candidates.is_empty(), "select_safest needs candidates");
    assert_eq!(candidates.len(), rollouts.len(), "candidate/rollout lists must align");

    if candidates.len() == 1 {
        let costs = vec![rollouts[0].as_ref().map(|r| rollout_cost(r, is_lane_change))];
        return Verdict {
            selected: candidates[0],
            costs,
            override_applied: false,
            fallback_reason: FallbackReason::SingleCandidate,
        };
    }

    let costs: Vec<Option<RolloutCost>> = rollouts
        .iter()
        .map(|r| r.as_ref().map(|r| rollout_cost(r, is_lane_change)))
        .collect();

    if costs.iter().any(|c| c.is_none()) {
        let mid = (candidates.len() - 1) / 2;
        return Verdict {
            selected: candidates[mid],
            costs,
            override_applied: false,
            fallback_reason: FallbackReason::RolloutFailure,
        };
    }

    let mut best = 0usize;
    for (i, c) in costs.iter().enumerate() {
        if c.as_ref().unwrap().total < costs[best].as_ref().unwrap().total {
            best = i;
        }
    }
    Verdict {
        selected: candidates[best],
        costs,
        override_applied: false,
        fallback_reason: FallbackReason::None,
    }
}

/// Pre-rollout short circuit: imminent front-collision risk. True when the
/// front gap is under 3 m with positive closing speed, or the front
/// time-to-collision is under 1.5 s.
pub fn hard_risk_precheck(state: &StructuredState) -> bool {
    let Some((gap, closing, _)) = state.front_object() else {
        return false;
    };
    if gap < HARD_GAP && closing > 0.0 {
        return true;
    }
    if closing > 0.0 && gap / closing < HARD_TTC {
        return true;
    }
    false
}

/// Post-scoring override: when every scored candidate is critical, replace
/// the selection with a hard emergency stop.
pub fn post_override(verdict: Verdict) -> Verdict {
    let scored: Vec<&RolloutCost> = verdict.costs.iter().flatten().collect();
    let all_critical =
        !scored.is_empty() && scored.iter().all(|c| c.p_crit >= CRITICAL_PENALTY);
    if all_critical {
        Verdict {
            selected: SubAction::emergency_stop(),
            costs: verdict.costs,
            override_applied: true,
            fallback_reason: FallbackReason::PostOverride,
        }
    } else {
        verdict
    }
}

/// One-line physical feedback for the next reasoning step.
pub fn verification_summary(template: ActionTemplate, verdict: &Verdict) -> String {
    if verdict.override_applied {
        let worst = verdict
            .costs
            .iter()
            .flatten()
            .map(|c| c.d_min)
            .fold(f64::INFINITY, f64::min);
        return format!(
            "override: every candidate under {} predicted critical (min distance {:.1} m); emergency stop",
            template.name(),
            worst
        );
    }
    let scored: Vec<&RolloutCost> = verdict.costs.iter().flatten().collect();
    if scored.is_empty() {
        return format!(
            "no rollout evidence for {}; executed {}/{}",
            template.name(),
            verdict.selected.template.name(),
            verdict.selected.label.name()
        );
    }
    if scored.iter().all(|c| c.total == 0.0) {
        return "no predicted risk".into();
    }
    let worst = scored
        .iter()
        .max_by(|a, b| a.total.partial_cmp(&b.total).unwrap())
        .unwrap();
    let dominant = if worst.p_crit >= worst.p_dist && worst.p_crit >= worst.p_lane {
        "collision"
    } else if worst.p_dist >= worst.p_lane {
        "small gap"
    } else {
        "lane excursion"
    };
    format!(
        "predicted {} under candidate {}; chose {}/{}",
        dominant,
        template.name(),
        verdict.selected.template.name(),
        verdict.selected.label.name()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::expand_candidates;
    use crate::state::{StructuredState, MASK, SOCIAL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rollout_with(d_min: f64, l_max: f64) -> Rollout {
        Rollout { states: vec![StructuredState::default()], d_min: vec![d_min], lateral: vec![l_max] }
    }

    /// d_min=2.0, l_max=0.5, lane keep: p_crit=100, p_dist=36, p_lane=0.
    #[test]
    fn cost_critical_example() {
        let c = cost_from_quantities(2.0, 0.5, false);
        assert_eq!(c.p_crit, 100.0);
        assert!((c.p_dist - 36.0).abs() < 1e-12);
        assert_eq!(c.p_lane, 0.0);
        assert!((c.total - 136.0).abs() < 1e-12);
    }

    #[test]
    fn cost_clean_example() {
        let c = cost_from_quantities(10.0, 1.0, false);
        assert_eq!(c.total, 0.0);
    }

    /// d_min=5.0, l_max=3.0, lane change: p_dist=9, p_lane=0.4, total=9.4.
    #[test]
    fn cost_lane_change_example() {
        let c = cost_from_quantities(5.0, 3.0, true);
        assert_eq!(c.p_crit, 0.0);
        assert!((c.p_dist - 9.0).abs() < 1e-12);
        assert!((c.p_lane - 0.4).abs() < 1e-12);
        assert!((c.total - 9.4).abs() < 1e-12);
    }

    #[test]
    fn cost_infinite_distance_is_free() {
        let c = cost_from_quantities(f64::INFINITY, 0.0, false);
        assert_eq!(c.total, 0.0);
    }

    /// The critical jump sits exactly at d_min = 3.0.
    #[test]
    fn critical_discontinuity_location() {
        let below = cost_from_quantities(CRITICAL_DISTANCE - 1e-9, 0.0, false);
        let above = cost_from_quantities(CRITICAL_DISTANCE + 1e-9, 0.0, false);
        assert_eq!(below.p_crit, 100.0);
        assert_eq!(above.p_crit, 0.0);
        assert!((below.total - above.total - 100.0).abs() < 1e-6);
    }

    /// argmax score == argmin cost on random cost vectors.
    #[test]
    fn score_cost_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(2..6);
            let costs: Vec<RolloutCost> = (0..n)
                .map(|_| {
                    cost_from_quantities(rng.random_range(0.0..12.0), rng.random_range(0.0..4.0), false)
                })
                .collect();
            // identical first-wins tie-breaking on both sides
            let mut argmin = 0;
            let mut argmax = 0;
            for i in 1..costs.len() {
                if costs[i].total < costs[argmin].total {
                    argmin = i;
                }
                if costs[i].score() > costs[argmax].score() {
                    argmax = i;
                }
            }
            assert_eq!(argmin, argmax);
        }
    }

    /// Decreasing d_min or increasing l_max never decreases the total cost.
    #[test]
    fn cost_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let d = rng.random_range(0.0..12.0);
            let l = rng.random_range(0.0..4.0);
            let lc = rng.random::<f64>() < 0.5;
            let base = cost_from_quantities(d, l, lc).total;
            let closer = cost_from_quantities(d - rng.random_range(0.0..2.0), l, lc).total;
            let wider = cost_from_quantities(d, l + rng.random_range(0.0..2.0), lc).total;
            assert!(closer >= base);
            assert!(wider >= base);
        }
    }

    #[test]
    fn select_single_candidate_direct() {
        let cands = vec![expand_candidates(ActionTemplate::SpeedDown)[1]];
        let v = select_safest(&cands, &[Some(rollout_with(2.0, 0.0))], false);
        assert_eq!(v.fallback_reason, FallbackReason::SingleCandidate);
        assert!(v.selected.matches(&cands[0]));
    }

    /// Costs [136, 9.4, 0] select the third candidate.
    #[test]
    fn select_argmin_cost() {
        let cands = expand_candidates(ActionTemplate::SpeedDown);
        let rollouts = vec![
            Some(rollout_with(2.0, 0.5)),
            Some(rollout_with(5.0, 3.0)),
            Some(rollout_with(10.0, 1.0)),
        ];
        let v = select_safest(&cands, &rollouts, false);
        assert_eq!(v.fallback_reason, FallbackReason::None);
        assert!(v.selected.matches(&cands[2]));
    }

    #[test]
    fn select_rollout_failure_middle() {
        let cands = expand_candidates(ActionTemplate::SpeedDown);
        let rollouts = vec![Some(rollout_with(9.0, 0.0)), None, Some(rollout_with(9.0, 0.0))];
        let v = select_safest(&cands, &rollouts, false);
        assert_eq!(v.fallback_reason, FallbackReason::RolloutFailure);
        assert!(v.selected.matches(&cands[1]));
    }

    #[test]
    fn select_tie_breaks_low_intensity() {
        let cands = expand_candidates(ActionTemplate::SpeedUp);
        let rollouts = vec![
            Some(rollout_with(20.0, 0.0)),
            Some(rollout_with(20.0, 0.0)),
            Some(rollout_with(20.0, 0.0)),
        ];
        let v = select_safest(&cands, &rollouts, false);
        assert!(v.selected.matches(&cands[0]), "tie must go to the softest candidate");
    }

    /// Every (candidates, rollouts) input yields exactly one selection.
    #[test]
    fn selection_totality_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let t = ActionTemplate::ALL[rng.random_range(0..7)];
            let group = expand_candidates(t);
            let n = rng.random_range(1..=group.len());
            let cands = &group[..n];
            let rollouts: Vec<Option<Rollout>> = (0..n)
                .map(|_| {
                    (rng.random::<f64>() < 0.9).then(|| {
                        rollout_with(rng.random_range(0.0..15.0), rng.random_range(0.0..4.0))
                    })
                })
                .collect();
            let v = select_safest(cands, &rollouts, t.is_lane_change());
            let v = post_override(v);
            assert!(
                cands.iter().any(|c| c.matches(&v.selected))
                    || v.selected.matches(&SubAction::emergency_stop())
            );
        }
    }

    fn state_with_front(gap: f64, closing: f64) -> StructuredState {
        let mut s = StructuredState::default();
        // one vehicle straight ahead: rel_x puts the bumper gap at `gap`
        s.0[SOCIAL] = gap + 2.0 * crate::sim::VEHICLE_HALF_LEN;
        s.0[SOCIAL + 2] = -closing;
        s.0[MASK] = 1.0;
        s
    }

    /// Leader 2 m ahead closing at 2 m/s trips the precheck.
    #[test]
    fn precheck_close_and_closing() {
        assert!(hard_risk_precheck(&state_with_front(2.0, 2.0)));
    }

    #[test]
    fn precheck_empty_road() {
        assert!(!hard_risk_precheck(&StructuredState::default()));
    }

    /// Leader 2 m ahead but opening: no trigger (closing clause fails, TTC
    /// undefined).
    #[test]
    fn precheck_opening_gap() {
        assert!(!hard_risk_precheck(&state_with_front(2.0, -1.0)));
    }

    /// TTC clause: 6 m gap closing at 5 m/s gives TTC 1.2 s < 1.5 s.
    #[test]
    fn precheck_ttc_clause() {
        assert!(hard_risk_precheck(&state_with_front(6.0, 5.0)));
        assert!(!hard_risk_precheck(&state_with_front(6.0, 3.0)));
    }

    #[test]
    fn override_when_all_critical() {
        let cands = expand_candidates(ActionTemplate::LaneChangeLeft);
        let rollouts: Vec<Option<Rollout>> =
            (0..3).map(|_| Some(rollout_with(1.0, 0.5))).collect();
        let v = post_override(select_safest(&cands, &rollouts, true));
        assert!(v.override_applied);
        assert_eq!(v.fallback_reason, FallbackReason::PostOverride);
        assert!(v.selected.matches(&SubAction::emergency_stop()));
        assert_eq!(v.selected.brake_cap, 1.0);
    }

    #[test]
    fn override_passthrough_when_one_safe() {
        let cands = expand_candidates(ActionTemplate::SpeedDown);
        let rollouts = vec![
            Some(rollout_with(1.0, 0.0)),
            Some(rollout_with(1.5, 0.0)),
            Some(rollout_with(6.0, 0.0)),
        ];
        let v = post_override(select_safest(&cands, &rollouts, false));
        assert!(!v.override_applied);
        assert!(v.selected.matches(&cands[2]));
    }

    #[test]
    fn summary_contents() {
        // lane change rejected by the critical term
        let cands = expand_candidates(ActionTemplate::LaneChangeLeft);
        let rollouts = vec![
            Some(rollout_with(1.0, 1.0)),
            Some(rollout_with(9.0, 0.5)),
            Some(rollout_with(9.0, 0.5)),
        ];
        let v = select_safest(&cands, &rollouts, true);
        let msg = verification_summary(ActionTemplate::LaneChangeLeft, &v);
        assert!(msg.contains("collision"), "{msg}");
        assert!(msg.contains("lane_change_left"), "{msg}");

        // clean scene
        let clean = vec![Some(rollout_with(20.0, 0.2)), Some(rollout_with(20.0, 0.2)), Some(rollout_with(20.0, 0.2))];
        let v2 = select_safest(&cands, &clean, true);
        assert_eq!(verification_summary(ActionTemplate::LaneChangeLeft, &v2), "no predicted risk");

        // override
        let crit: Vec<Option<Rollout>> = (0..3).map(|_| Some(rollout_with(0.5, 0.0))).collect();
        let v3 = post_override(select_safest(&cands, &crit, true));
        let msg3 = verification_summary(ActionTemplate::LaneChangeLeft, &v3);
        assert!(msg3.contains("override"), "{msg3}");
    }
}
