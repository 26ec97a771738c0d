//! Run configuration: agent variant, simulator setup, model/reasoner wiring,
//! and the sectioned key-value config file with environment overrides.

use crate::control::SpeedDeltaUnits;
use crate::sim::map::MapKind;
use crate::sim::WorldConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const REASONER_ENDPOINT_ENV: &str = "RIA_REASONER_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentVariant {
    /// Full loop: reasoner + rollout verification + rule-based control.
    RiaFull,
    /// Same reasoner and action space, verification removed.
    LlmNoWm,
    /// Control backend alone.
    TmOnly,
    /// Scripted template selection executed unverified, no memory machinery.
    ScriptedOnly,
}

impl AgentVariant {
    pub fn name(self) -> &'static str {
        match self {
            AgentVariant::RiaFull => "ria_full",
            AgentVariant::LlmNoWm => "llm_no_wm",
            AgentVariant::TmOnly => "tm_only",
            AgentVariant::ScriptedOnly => "scripted_only",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        match raw {
            "ria_full" => Some(AgentVariant::RiaFull),
            "llm_no_wm" => Some(AgentVariant::LlmNoWm),
            "tm_only" => Some(AgentVariant::TmOnly),
            "scripted_only" => Some(AgentVariant::ScriptedOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerKind {
    Scripted,
    /// Scripted with every n-th decision reduced to a single candidate
    /// (coverage runs).
    ScriptedSingleEvery(u64),
    External(String),
}

/// Map rotation for an episode set. Fixed uses one layout; Mixed cycles the
/// three built-in layouts by episode index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSelection {
    Fixed(MapKind),
    Mixed,
}

impl MapSelection {
    pub fn map_for(&self, episode_index: usize) -> MapKind {
        match self {
            MapSelection::Fixed(k) => *k,
            MapSelection::Mixed => {
                [MapKind::Straight, MapKind::Grid, MapKind::Boulevard][episode_index % 3]
            }
        }
    }
}

/// Test-oriented fault injection, off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    /// Force every n-th candidate rollout to report failure.
    pub rollout_failure_every: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: AgentVariant,
    pub sim: WorldConfig,
    pub maps: MapSelection,
    pub checkpoint: Option<PathBuf>,
    pub reasoner: ReasonerKind,
    /// Rollout horizon in control steps.
    pub horizon: usize,
    /// Behavior memory depth.
    pub memory_k: usize,
    /// Decision cadence in simulator steps.
    pub decision_every: u64,
    pub speed_delta_units: SpeedDeltaUnits,
    pub episodes: usize,
    pub seed: u64,
    pub fault: FaultInjection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: AgentVariant::ScriptedOnly,
            sim: WorldConfig::default_for(MapKind::Grid),
            maps: MapSelection::Mixed,
            checkpoint: None,
            reasoner: ReasonerKind::Scripted,
            horizon: 10,
            memory_k: 5,
            decision_every: 5,
            speed_delta_units: SpeedDeltaUnits::Mps,
            episodes: 50,
            seed: 1,
            fault: FaultInjection::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.horizon < 1 {
            return Err(ConfigError::Invalid("horizon must be >= 1".into()));
        }
        if self.variant == AgentVariant::RiaFull && self.checkpoint.is_none() {
            return Err(ConfigError::Invalid("ria_full requires a checkpoint".into()));
        }
        self.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// FNV-1a hash of the canonical serialized config, for reproducibility
    /// stamps in summaries.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialization");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

// Sectioned config file. Every field is optional; unset fields keep defaults.

#[derive(Debug, Default, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub wm: WmSection,
    #[serde(default)]
    pub reasoner: ReasonerSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Default, Deserialize)]
pub struct SimSection {
    pub map: Option<String>,
    pub n_vehicles: Option<usize>,
    pub n_pedestrians: Option<usize>,
    pub dt: Option<f64>,
    pub timeout_steps: Option<u64>,
    pub hard_brake_thresh: Option<f64>,
    pub high_jerk_thresh: Option<f64>,
    pub ped_trigger: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
pub struct WmSection {
    pub checkpoint: Option<String>,
    pub horizon: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
pub struct ReasonerSection {
    /// "scripted", "scripted_single_every:<n>", or "external:<host:port>".
    pub kind: Option<String>,
    pub memory_k: Option<usize>,
    /// "mps" or "kmh" for the speed-up/-down increments.
    pub speed_delta_units: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct ControllerSection {
    pub decision_every: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
pub struct BenchmarkSection {
    pub variant: Option<String>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
}

fn parse_reasoner_kind(raw: &str) -> Result<ReasonerKind, ConfigError> {
    if raw == "scripted" {
        return Ok(ReasonerKind::Scripted);
    }
    if let Some(n) = raw.strip_prefix("scripted_single_every:") {
        let n = n.parse().map_err(|_| ConfigError::Parse(format!("bad reasoner kind {raw:?}")))?;
        return Ok(ReasonerKind::ScriptedSingleEvery(n));
    }
    if let Some(ep) = raw.strip_prefix("external:") {
        return Ok(ReasonerKind::External(ep.to_string()));
    }
    Err(ConfigError::Parse(format!("unknown reasoner kind {raw:?}")))
}

/// Apply a config file over defaults, then the endpoint environment override.
pub fn apply_file(mut run: RunConfig, path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let file: FileConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;

    if let Some(map) = &file.sim.map {
        if map == "mixed" {
            run.maps = MapSelection::Mixed;
        } else if map == "stress" {
            run.sim = WorldConfig::stress();
            run.maps = MapSelection::Fixed(MapKind::Grid);
        } else {
            let kind = MapKind::parse(map)
                .ok_or_else(|| ConfigError::Parse(format!("unknown map {map:?}")))?;
            run.maps = MapSelection::Fixed(kind);
            run.sim.map = kind;
        }
    }
    if let Some(v) = file.sim.n_vehicles {
        run.sim.n_vehicles = v;
    }
    if let Some(v) = file.sim.n_pedestrians {
        run.sim.n_pedestrians = v;
    }
    if let Some(v) = file.sim.dt {
        run.sim.dt = v;
    }
    if let Some(v) = file.sim.timeout_steps {
        run.sim.timeout_steps = v;
    }
    if let Some(v) = file.sim.hard_brake_thresh {
        run.sim.hard_brake_thresh = v;
    }
    if let Some(v) = file.sim.high_jerk_thresh {
        run.sim.high_jerk_thresh = v;
    }
    if let Some(v) = file.sim.ped_trigger {
        run.sim.ped_trigger_override = Some(v);
    }
    if let Some(v) = &file.wm.checkpoint {
        run.checkpoint = Some(PathBuf::from(v));
    }
    if let Some(v) = file.wm.horizon {
        run.horizon = v;
    }
    if let Some(kind) = &file.reasoner.kind {
        run.reasoner = parse_reasoner_kind(kind)?;
    }
    if let Some(v) = file.reasoner.memory_k {
        run.memory_k = v;
    }
    if let Some(u) = &file.reasoner.speed_delta_units {
        run.speed_delta_units = match u.as_str() {
            "mps" => SpeedDeltaUnits::Mps,
            "kmh" => SpeedDeltaUnits::Kmh,
            other => return Err(ConfigError::Parse(format!("unknown units {other:?}"))),
        };
    }
    if let Some(v) = file.controller.decision_every {
        run.decision_every = v;
    }
    if let Some(v) = &file.benchmark.variant {
        run.variant = AgentVariant::parse(v)
            .ok_or_else(|| ConfigError::Parse(format!("unknown variant {v:?}")))?;
    }
    if let Some(v) = file.benchmark.episodes {
        run.episodes = v;
    }
    if let Some(v) = file.benchmark.seed {
        run.seed = v;
    }

    Ok(apply_env(run))
}

/// The external reasoner endpoint can come from the environment.
pub fn apply_env(mut run: RunConfig) -> RunConfig {
    if let Ok(ep) = std::env::var(REASONER_ENDPOINT_ENV) {
        if !ep.is_empty() {
            run.reasoner = ReasonerKind::External(ep);
        }
    }
    run
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn file_sections_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ria.toml");
        std::fs::write(
            &path,
            r#"
[sim]
map = "straight"
n_vehicles = 12
dt = 0.1

[reasoner]
kind = "scripted_single_every:17"
memory_k = 3

[controller]
decision_every = 4

[benchmark]
variant = "llm_no_wm"
episodes = 9
seed = 77
"#,
        )
        .unwrap();
        let run = apply_file(RunConfig::default(), &path).unwrap();
        assert_eq!(run.maps, MapSelection::Fixed(MapKind::Straight));
        assert_eq!(run.sim.n_vehicles, 12);
        assert_eq!(run.reasoner, ReasonerKind::ScriptedSingleEvery(17));
        assert_eq!(run.memory_k, 3);
        assert_eq!(run.decision_every, 4);
        assert_eq!(run.variant, AgentVariant::LlmNoWm);
        assert_eq!(run.episodes, 9);
        assert_eq!(run.seed, 77);
    }

    #[test]
    fn ria_full_requires_checkpoint() {
        let run = RunConfig { variant: AgentVariant::RiaFull, ..Default::default() };
        assert!(run.validate().is_err());
    }
}
