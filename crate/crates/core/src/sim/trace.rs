//! Episode trace log: versioned header line followed by one JSON record per
//! step. The harness appends controller and verdict extension fields when an
//! agent is in the loop.

use super::{AgentState, ControlCommand, StepEvents};
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};

pub const TRACE_HEADER: &str = "RIA-TRACE v1";

/// Controller extension fields logged every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrlLog {
    /// Bucketized risk score.
    pub r: u32,
    /// "low" | "medium" | "high".
    pub mode: String,
    pub effective_target_speed: f64,
    pub override_active: bool,
    pub lane_intent: i8,
}

/// Verdict extension fields logged at decision steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLog {
    pub template: String,
    pub selected_label: String,
    pub fallback_reason: String,
    pub override_applied: bool,
    /// Per-candidate totals; None marks a failed rollout.
    pub costs: Vec<Option<f64>>,
    /// Recorded decision score: a number or the hard-trigger sentinel.
    pub q: String,
    /// Rollouts performed for this decision.
    pub rollouts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub agents: Vec<AgentState>,
    pub cmd: ControlCommand,
    pub events: StepEvents,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ctrl: Option<CtrlLog>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verdict: Option<VerdictLog>,
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{TRACE_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, rec: &TraceRecord) -> io::Result<()> {
        let line = serde_json::to_string(rec).map_err(io::Error::other)?;
        writeln!(self.out, "{line}")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Read a full trace, validating the header line.
pub fn read_trace<R: BufRead>(input: R) -> io::Result<Vec<TraceRecord>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h == TRACE_HEADER => {}
        Some(Ok(h)) => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unexpected trace header {h:?}"),
            ))
        }
        _ => return Err(io::Error::new(io::ErrorKind::InvalidData, "empty trace")),
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(io::Error::other)?);
    }
    Ok(out)
}
