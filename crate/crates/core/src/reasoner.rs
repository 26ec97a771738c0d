//! The Reason stage: discrete action templates, intensity-graded candidate
//! groups, the three-part prompt, a strict structured-response parser, a
//! short behavior memory, and a deterministic scripted reasoner so the loop
//! runs with no external service. An external reasoner speaks newline-
//! delimited JSON over a byte stream; any parse or transport failure falls
//! back to the scripted policy after one retry.

use crate::sim::map::SignalState;
use crate::sim::EgoRoadContext;
use crate::state::StructuredState;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "ria-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionTemplate {
    Stop,
    SpeedUp,
    SpeedDown,
    MaintainSpeed,
    LaneChangeLeft,
    LaneChangeRight,
    NormalBehavior,
}

impl ActionTemplate {
    pub const ALL: [ActionTemplate; 7] = [
        ActionTemplate::Stop,
        ActionTemplate::SpeedUp,
        ActionTemplate::SpeedDown,
        ActionTemplate::MaintainSpeed,
        ActionTemplate::LaneChangeLeft,
        ActionTemplate::LaneChangeRight,
        ActionTemplate::NormalBehavior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionTemplate::Stop => "stop",
            ActionTemplate::SpeedUp => "speed_up",
            ActionTemplate::SpeedDown => "speed_down",
            ActionTemplate::MaintainSpeed => "maintain_speed",
            ActionTemplate::LaneChangeLeft => "lane_change_left",
            ActionTemplate::LaneChangeRight => "lane_change_right",
            ActionTemplate::NormalBehavior => "normal_behavior",
        }
    }

    /// Accepts snake_case and the spaced/hyphenated spellings.
    pub fn parse(raw: &str) -> Option<ActionTemplate> {
        let norm: String = raw
            .trim()
            .to_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        let norm = match norm.as_str() {
            "lane_changing_left" => "lane_change_left",
            "lane_changing_right" => "lane_change_right",
            other => other,
        };
        Self::ALL.into_iter().find(|t| t.name() == norm)
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, ActionTemplate::LaneChangeLeft | ActionTemplate::LaneChangeRight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Soft,
    Base,
    Hard,
    Minus,
    Plus,
    Gentle,
    Fast,
    Maintain,
    Decelerate,
    HardDecelerate,
    Stop,
}

impl Intensity {
    pub fn name(self) -> &'static str {
        match self {
            Intensity::Soft => "soft",
            Intensity::Base => "base",
            Intensity::Hard => "hard",
            Intensity::Minus => "minus",
            Intensity::Plus => "plus",
            Intensity::Gentle => "gentle",
            Intensity::Fast => "fast",
            Intensity::Maintain => "maintain",
            Intensity::Decelerate => "decelerate",
            Intensity::HardDecelerate => "hard_decelerate",
            Intensity::Stop => "stop",
        }
    }
}

/// Intensity-parameterized instantiation of a template. `speed_delta` carries
/// the speed-up/-down magnitudes (signed); `speed_bias_kmh` carries the
/// maintain offset or lane-change bias; `brake_cap` caps braking authority.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubAction {
    pub template: ActionTemplate,
    pub label: Intensity,
    pub speed_delta: f64,
    pub speed_bias_kmh: f64,
    pub brake_cap: f64,
}

impl SubAction {
    fn new(
        template: ActionTemplate,
        label: Intensity,
        speed_delta: f64,
        speed_bias_kmh: f64,
        brake_cap: f64,
    ) -> Self {
        Self { template, label, speed_delta, speed_bias_kmh, brake_cap }
    }

    pub fn matches(&self, other: &SubAction) -> bool {
        self.template == other.template
            && self.label == other.label
            && (self.speed_delta - other.speed_delta).abs() < 1e-9
            && (self.speed_bias_kmh - other.speed_bias_kmh).abs() < 1e-9
            && (self.brake_cap - other.brake_cap).abs() < 1e-9
    }

    /// Emergency stop used by the hard-rule fallback and post-override.
    pub fn emergency_stop() -> Self {
        expand_candidates(ActionTemplate::Stop)[2]
    }
}

/// The predefined intensity group per template.
///
/// speed-up uses soft/base/hard increments 0.25/0.5/1.0; speed-down uses
/// decrements 0.8/1.5/2.5; stop uses brake caps 0.4/0.7/1.0; maintain-speed
/// uses -1/0/+1 km/h offsets; lane changes use -3/0/+3 km/h bias; normal
/// behavior uses the conservative four-level set.
pub fn expand_candidates(template: ActionTemplate) -> Vec<SubAction> {
    use ActionTemplate as T;
    use Intensity as I;
    match template {
        T::SpeedUp => vec![
            SubAction::new(template, I::Soft, 0.25, 0.0, 1.0),
            SubAction::new(template, I::Base, 0.5, 0.0, 1.0),
            SubAction::new(template, I::Hard, 1.0, 0.0, 1.0),
        ],
        T::SpeedDown => vec![
            SubAction::new(template, I::Soft, -0.8, 0.0, 1.0),
            SubAction::new(template, I::Base, -1.5, 0.0, 1.0),
            SubAction::new(template, I::Hard, -2.5, 0.0, 1.0),
        ],
        T::Stop => vec![
            SubAction::new(template, I::Soft, 0.0, 0.0, 0.4),
            SubAction::new(template, I::Base, 0.0, 0.0, 0.7),
            SubAction::new(template, I::Hard, 0.0, 0.0, 1.0),
        ],
        T::MaintainSpeed => vec![
            SubAction::new(template, I::Minus, 0.0, -1.0, 1.0),
            SubAction::new(template, I::Base, 0.0, 0.0, 1.0),
            SubAction::new(template, I::Plus, 0.0, 1.0, 1.0),
        ],
        T::LaneChangeLeft | T::LaneChangeRight => vec![
            SubAction::new(template, I::Gentle, 0.0, -3.0, 1.0),
            SubAction::new(template, I::Base, 0.0, 0.0, 1.0),
            SubAction::new(template, I::Fast, 0.0, 3.0, 1.0),
        ],
        T::NormalBehavior => vec![
            SubAction::new(template, I::Maintain, 0.0, 0.0, 1.0),
            SubAction::new(template, I::Decelerate, -0.8, 0.0, 1.0),
            SubAction::new(template, I::HardDecelerate, -2.5, 0.0, 1.0),
            SubAction::new(template, I::Stop, 0.0, 0.0, 1.0),
        ],
    }
}

/// The nominal unverified action for a template (used when refinement is
/// skipped or verification is disabled).
pub fn base_subaction(template: ActionTemplate) -> SubAction {
    let group = expand_candidates(template);
    match template {
        ActionTemplate::NormalBehavior => group[0],
        _ => group[1],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub decision: ActionTemplate,
    pub rationale: String,
    pub candidates: Vec<SubAction>,
}

/// Compact scene description shared by the prompt and the wire request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub ego_speed: f64,
    pub speed_limit: f64,
    pub signal: String,
    pub dist_stop_line: f64,
    /// (bumper gap m, leader speed m/s)
    pub leader: Option<(f64, f64)>,
    /// Distance to the nearest crossing pedestrian ahead, if any.
    pub pedestrian_ahead: Option<f64>,
    pub lane_exists_left: bool,
    pub lane_exists_right: bool,
    /// (front gap, rear gap) in the adjacent lanes.
    pub left_gaps: (f64, f64),
    pub right_gaps: (f64, f64),
    pub route_heading_error: f64,
    pub route_progress: f64,
}

fn fin(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        1e9
    }
}

impl SceneSummary {
    pub fn from_observation(state: &StructuredState, ctx: &EgoRoadContext) -> Self {
        Self {
            ego_speed: state.ego_speed(),
            speed_limit: ctx.speed_limit,
            signal: match ctx.signal_state {
                SignalState::Green => "green".into(),
                SignalState::Yellow => "yellow".into(),
                SignalState::Red => "red".into(),
            },
            dist_stop_line: fin(ctx.dist_stop_line),
            leader: ctx.leader,
            pedestrian_ahead: ctx.crossing_ped_dist.is_finite().then_some(ctx.crossing_ped_dist),
            lane_exists_left: ctx.lane_exists_left,
            lane_exists_right: ctx.lane_exists_right,
            left_gaps: (fin(ctx.left_gaps.0), fin(ctx.left_gaps.1)),
            right_gaps: (fin(ctx.right_gaps.0), fin(ctx.right_gaps.1)),
            route_heading_error: ctx.route_heading_error,
            route_progress: ctx.route_progress,
        }
    }
}

/// Decision score recorded in memory: a candidate score, or the sentinel for
/// the hard-rule path, or skipped refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Value(f64),
    HardTrigger,
    Skipped,
}

impl std::fmt::Display for Score {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Score::Value(v) => write!(f, "{v:.3}"),
            Score::HardTrigger => write!(f, "hard_trigger"),
            Score::Skipped => write!(f, "skipped"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub template: ActionTemplate,
    pub executed: SubAction,
    pub summary: String,
    pub score: Score,
    pub step: u64,
}

/// Bounded FIFO of recent decisions and their verification outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    entries: VecDeque<MemoryEntry>,
    k: usize,
}

impl MemoryBuffer {
    pub fn new(k: usize) -> Self {
        Self { entries: VecDeque::with_capacity(k), k }
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn newest(&self) -> Option<&MemoryEntry> {
        self.entries.back()
    }
}

/// Append an entry, evicting the oldest beyond the bound.
pub fn update_memory(
    memory: &mut MemoryBuffer,
    template: ActionTemplate,
    executed: SubAction,
    summary: String,
    score: Score,
    step: u64,
) {
    memory.entries.push_back(MemoryEntry { template, executed, summary, score, step });
    while memory.entries.len() > memory.k {
        memory.entries.pop_front();
    }
}

const SECTION_STATE: &str = "## CURRENT STATE & ENVIRONMENT";
const SECTION_MEMORY: &str = "## PREVIOUS DRIVING BEHAVIORS";
const SECTION_SYSTEM: &str = "## DRIVER SYSTEM INSTRUCTION";

/// Deterministic three-section prompt.
pub fn build_prompt(summary: &SceneSummary, memory: &MemoryBuffer) -> String {
    let mut out = String::new();
    out.push_str(SECTION_STATE);
    out.push('\n');
    out.push_str(&format!(
        "ego speed: {:.2} m/s (limit {:.2} m/s)\nsignal: {} at {:.1} m\n",
        summary.ego_speed, summary.speed_limit, summary.signal, summary.dist_stop_line
    ));
    match summary.leader {
        Some((gap, v)) => out.push_str(&format!("leading vehicle: gap {gap:.1} m at {v:.2} m/s\n")),
        None => out.push_str("leading vehicle: none\n"),
    }
    match summary.pedestrian_ahead {
        Some(d) => out.push_str(&format!("pedestrian crossing ahead: {d:.1} m\n")),
        None => out.push_str("pedestrian crossing ahead: none\n"),
    }
    out.push_str(&format!(
        "lane change permitted: left={} right={}\nadjacent gaps: left {:.1}/{:.1} m, right {:.1}/{:.1} m\nroute: progress {:.2}, heading error {:.3} rad\n",
        summary.lane_exists_left,
        summary.lane_exists_right,
        summary.left_gaps.0,
        summary.left_gaps.1,
        summary.right_gaps.0,
        summary.right_gaps.1,
        summary.route_progress,
        summary.route_heading_error
    ));

    out.push('\n');
    out.push_str(SECTION_MEMORY);
    out.push('\n');
    if memory.is_empty() {
        out.push_str("no prior behavior\n");
    } else {
        for e in memory.entries() {
            out.push_str(&format!(
                "step {}: {} -> {}/{} (score {}) | {}\n",
                e.step,
                e.template.name(),
                e.executed.template.name(),
                e.executed.label.name(),
                e.score,
                e.summary
            ));
        }
    }

    out.push('\n');
    out.push_str(SECTION_SYSTEM);
    out.push('\n');
    out.push_str(
        "You are the driving decision module. Respond with a single JSON object \
         {\"decision\": <template>, \"rationale\": <text>, \"candidates\": [...]}. \
         The decision must be one of: ",
    );
    let names: Vec<&str> = ActionTemplate::ALL.iter().map(|t| t.name()).collect();
    out.push_str(&names.join(", "));
    out.push_str(
        ".\nCandidates must be drawn from the template's predefined intensity group; \
         an empty list defers to the full group.\n",
    );
    out
}

#[derive(Debug, Error)]
pub enum ReasonError {
    #[error("malformed response: {0}")]
    Parse(String),
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Deserialize)]
struct RawResponse {
    decision: String,
    #[serde(default)]
    rationale: String,
    #[serde(default)]
    candidates: Vec<serde_json::Value>,
}

/// Validate a structured response: closed template set, candidates restricted
/// to the template's predefined group (invalid ones dropped). An empty
/// candidate list expands to the full group.
pub fn parse_response(raw: &str) -> Result<DecisionResponse, ReasonError> {
    let parsed: RawResponse =
        serde_json::from_str(raw).map_err(|e| ReasonError::Parse(e.to_string()))?;
    let template = ActionTemplate::parse(&parsed.decision)
        .ok_or_else(|| ReasonError::UnknownTemplate(parsed.decision.clone()))?;
    let group = expand_candidates(template);
    let mut candidates: Vec<SubAction> = Vec::new();
    for c in parsed.candidates {
        let Ok(sub) = serde_json::from_value::<SubAction>(c) else { continue };
        if group.iter().any(|g| g.matches(&sub)) && !candidates.iter().any(|k| k.matches(&sub)) {
            candidates.push(sub);
        }
    }
    if candidates.is_empty() {
        candidates = group;
    }
    Ok(DecisionResponse { decision: template, rationale: parsed.rationale, candidates })
}

pub fn serialize_response(resp: &DecisionResponse) -> String {
    serde_json::to_string(resp).expect("response serialization")
}

/// Deterministic rule policy standing in for a language-model service.
/// Candidates are always the full intensity group.
pub fn scripted_reasoner(summary: &SceneSummary, _memory: &MemoryBuffer) -> DecisionResponse {
    let stopped_leader_near = summary.leader.map_or(false, |(gap, v)| gap < 12.0 && v < 0.5);
    if summary.signal == "red" || stopped_leader_near {
        let decision = ActionTemplate::SpeedDown;
        return DecisionResponse {
            decision,
            rationale: "red signal or stopped leader ahead; reduce speed".into(),
            candidates: expand_candidates(decision),
        };
    }

    if let Some((gap, v_lead)) = summary.leader {
        let slow_by = summary.ego_speed - v_lead;
        if gap < 20.0 && slow_by > 3.0 {
            let left_free =
                summary.lane_exists_left && summary.left_gaps.0 > 12.0 && summary.left_gaps.1 > 8.0;
            let right_free = summary.lane_exists_right
                && summary.right_gaps.0 > 12.0
                && summary.right_gaps.1 > 8.0;
            if left_free || right_free {
                let decision =
                    if left_free && (!right_free || summary.left_gaps.0 >= summary.right_gaps.0) {
                        ActionTemplate::LaneChangeLeft
                    } else {
                        ActionTemplate::LaneChangeRight
                    };
                return DecisionResponse {
                    decision,
                    rationale: "leader notably slower and adjacent lane free; change lane".into(),
                    candidates: expand_candidates(decision),
                };
            }
        }
    }

    let road_clear = summary.leader.map_or(true, |(gap, _)| gap >= 25.0)
        && summary.pedestrian_ahead.map_or(true, |d| d >= 25.0);
    if summary.speed_limit - summary.ego_speed > 2.0 && road_clear {
        let decision = ActionTemplate::SpeedUp;
        return DecisionResponse {
            decision,
            rationale: "below the speed limit on a clear road; speed up".into(),
            candidates: expand_candidates(decision),
        };
    }

    if summary.pedestrian_ahead.map_or(false, |d| d < 8.0) {
        let decision = ActionTemplate::Stop;
        return DecisionResponse {
            decision,
            rationale: "pedestrian crossing close ahead; stop".into(),
            candidates: expand_candidates(decision),
        };
    }

    let decision = ActionTemplate::NormalBehavior;
    DecisionResponse {
        decision,
        rationale: "no special condition; keep lane under traffic rules".into(),
        candidates: expand_candidates(decision),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub scene_summary: SceneSummary,
    pub memory_entries: Vec<MemoryEntry>,
    pub schema_version: String,
}

/// Newline-delimited JSON over TCP with a 2 s deadline and one retry.
pub struct ExternalReasoner {
    pub endpoint: String,
    pub timeout: Duration,
}

impl ExternalReasoner {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), timeout: Duration::from_secs(2) }
    }

    fn call_once(&self, request: &WireRequest) -> Result<DecisionResponse, ReasonError> {
        let stream = TcpStream::connect(&self.endpoint)
            .map_err(|e| ReasonError::Transport(e.to_string()))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .and_then(|_| stream.set_write_timeout(Some(self.timeout)))
            .map_err(|e| ReasonError::Transport(e.to_string()))?;
        let mut writer = stream.try_clone().map_err(|e| ReasonError::Transport(e.to_string()))?;
        let line = serde_json::to_string(request).map_err(|e| ReasonError::Parse(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| ReasonError::Transport(e.to_string()))?;
        writer.flush().map_err(|e| ReasonError::Transport(e.to_string()))?;
        let mut reader = BufReader::new(stream);
        let mut response = String::new();
        reader.read_line(&mut response).map_err(|e| ReasonError::Transport(e.to_string()))?;
        if response.is_empty() {
            return Err(ReasonError::Transport("connection closed".into()));
        }
        parse_response(response.trim_end())
    }

    /// One retry, then the error propagates for the scripted fallback.
    pub fn call(
        &self,
        summary: &SceneSummary,
        memory: &MemoryBuffer,
    ) -> Result<DecisionResponse, ReasonError> {
        let request = WireRequest {
            scene_summary: summary.clone(),
            memory_entries: memory.entries().cloned().collect(),
            schema_version: SCHEMA_VERSION.into(),
        };
        self.call_once(&request).or_else(|_| self.call_once(&request))
    }
}

/// Reasoner selection for an agent.
pub enum Reasoner {
    Scripted,
    /// Scripted, but every n-th decision proposes only the middle candidate
    /// (exercises the single-candidate path in coverage runs).
    ScriptedSingleEvery(u64),
    External(ExternalReasoner),
}

impl Reasoner {
    /// Always yields a decision: external failures retry once, then fall back
    /// to the scripted policy. The bool reports whether the fallback fired.
    pub fn decide(
        &self,
        summary: &SceneSummary,
        memory: &MemoryBuffer,
        decision_index: u64,
    ) -> (DecisionResponse, bool) {
        match self {
            Reasoner::Scripted => (scripted_reasoner(summary, memory), false),
            Reasoner::ScriptedSingleEvery(n) => {
                let mut resp = scripted_reasoner(summary, memory);
                if *n > 0 && decision_index % n == n - 1 && resp.candidates.len() > 1 {
                    let mid = resp.candidates[(resp.candidates.len() - 1) / 2];
                    resp.candidates = vec![mid];
                }
                (resp, false)
            }
            Reasoner::External(ext) => match ext.call(summary, memory) {
                Ok(resp) => (resp, false),
                Err(_) => (scripted_reasoner(summary, memory), true),
            },
        }
    }
}
