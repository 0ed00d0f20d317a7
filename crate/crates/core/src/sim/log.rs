//! Run log: per-substep agent states as CSV plus a JSON sidecar with
//! planner, safety and collision events.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::CollisionZone;
use crate::planner::{Mode, RouteReport, TrustEvent};
use crate::safety::SafetyEvent;
use crate::AgentId;

use super::scenario::ControllerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GoalReached,
    Deadlock,
    Horizon,
    Collision,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::GoalReached => "goal-reached",
            Termination::Deadlock => "deadlock",
            Termination::Horizon => "horizon",
            Termination::Collision => "collision",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlSource {
    Plan,
    Script,
    Override,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub t: f64,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub x: f64,
    pub y: f64,
    /// Jerk applied from `t` until the next row.
    pub jerk: f64,
    pub source: ControlSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub id: AgentId,
    pub controller: ControllerKind,
    pub path: String,
    pub footprint_radius: f64,
    pub rows: Vec<SampleRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRecord {
    pub t: f64,
    pub agent: AgentId,
    pub mode: Mode,
    pub p_go: f64,
    pub trust_event: TrustEvent,
    pub homotopy: String,
    pub expected_total: f64,
    pub required_decel: f64,
    /// Jerk committed for the interval starting one action later.
    pub committed_jerk: f64,
    pub horizon: f64,
    pub infeasible: bool,
    pub unambiguous: Option<bool>,
    pub routes: Vec<RouteReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub t: f64,
    pub agents: (AgentId, AgentId),
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub scenario: String,
    pub seed: u64,
    pub step: f64,
    pub agents: Vec<AgentTrace>,
    pub zones: Vec<CollisionZone>,
    pub planner: Vec<PlannerRecord>,
    pub safety: Vec<SafetyEvent>,
    pub collisions: Vec<CollisionEvent>,
    pub termination: Termination,
    pub end_time: f64,
}

/// The structured sidecar: everything except the dense samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub scenario: String,
    pub seed: u64,
    pub termination: Termination,
    pub end_time: f64,
    pub zones: Vec<CollisionZone>,
    pub planner: Vec<PlannerRecord>,
    pub safety: Vec<SafetyEvent>,
    pub collisions: Vec<CollisionEvent>,
}

pub const CSV_HEADER: &str = "t,agent,s,v,a,x,y,jerk,source";

impl RunLog {
    pub fn trace(&self, id: &str) -> Option<&AgentTrace> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Samples interleaved by time, agents in declaration order, fixed six
    /// decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let n = self.agents.iter().map(|a| a.rows.len()).max().unwrap_or(0);
        for k in 0..n {
            for agent in &self.agents {
                let Some(r) = agent.rows.get(k) else { continue };
                let source = match r.source {
                    ControlSource::Plan => "plan",
                    ControlSource::Script => "script",
                    ControlSource::Override => "override",
                };
                let _ = writeln!(
                    out,
                    "{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                    r.t, agent.id, r.s, r.v, r.a, r.x, r.y, r.jerk, source
                );
            }
        }
        out
    }

    pub fn events(&self) -> EventLog {
        EventLog {
            scenario: self.scenario.clone(),
            seed: self.seed,
            termination: self.termination,
            end_time: self.end_time,
            zones: self.zones.clone(),
            planner: self.planner.clone(),
            safety: self.safety.clone(),
            collisions: self.collisions.clone(),
        }
    }

    pub fn events_json(&self) -> String {
        serde_json::to_string_pretty(&self.events()).expect("event log serializes")
    }

    /// Number of safety overrides triggered for `agent`.
    pub fn overrides(&self, agent: &str) -> usize {
        self.safety
            .iter()
            .filter(|e| e.agent == agent && e.kind == crate::safety::SafetyEventKind::Trigger)
            .count()
    }

    /// Entry and exit times of `agent` for the zone, from the logged samples.
    pub fn zone_times(&self, agent: &str, zone: &CollisionZone) -> (Option<f64>, Option<f64>) {
        let (Some(trace), Some(iv)) = (self.trace(agent), zone.interval_for(agent)) else {
            return (None, None);
        };
        let enter = trace.rows.iter().find(|r| r.s >= iv.s_in).map(|r| r.t);
        let exit = trace.rows.iter().find(|r| r.s >= iv.s_out).map(|r| r.t);
        (enter, exit)
    }
}

/// Headline numbers of one run from one agent's point of view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub agent: AgentId,
    pub termination: Termination,
    /// Largest deceleration reached [m/s^2], positive.
    pub max_decel: f64,
    /// First time the deceleration exceeded [`BRAKING_ONSET`].
    pub braking_onset: Option<f64>,
    /// Gap between the first agent leaving and the second entering the
    /// agent's first zone, when both traversed it.
    pub clearance: Option<f64>,
    pub deadlock: bool,
    pub overrides: usize,
    pub collisions: usize,
}

/// Deceleration that counts as braking [m/s^2].
pub const BRAKING_ONSET: f64 = 0.5;

impl RunLog {
    pub fn summary(&self, agent: &str) -> Option<RunSummary> {
        let trace = self.trace(agent)?;
        let max_decel = trace.rows.iter().map(|r| -r.a).fold(0.0, f64::max);
        let braking_onset = trace
            .rows
            .iter()
            .find(|r| -r.a > BRAKING_ONSET)
            .map(|r| r.t);
        let clearance = self.zones.iter().find(|z| z.involves(agent)).and_then(|z| {
            let partner = z.partner_of(agent)?;
            let (Some(e1), Some(x1)) = self.zone_times(agent, z) else {
                return None;
            };
            let (Some(e2), Some(x2)) = self.zone_times(partner, z) else {
                return None;
            };
            Some(if x1 <= x2 { e2 - x1 } else { e1 - x2 })
        });
        Some(RunSummary {
            agent: agent.to_string(),
            termination: self.termination,
            max_decel,
            braking_onset,
            clearance,
            deadlock: self.termination == Termination::Deadlock,
            overrides: self
                .safety
                .iter()
                .filter(|e| e.kind == crate::safety::SafetyEventKind::Trigger)
                .count(),
            collisions: self.collisions.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log() -> RunLog {
        let row = |t: f64| SampleRow {
            t,
            s: 8.0 * t,
            v: 8.0,
            a: 0.0,
            x: 8.0 * t,
            y: 0.0,
            jerk: 0.0,
            source: ControlSource::Plan,
        };
        RunLog {
            scenario: "unit".into(),
            seed: 1,
            step: 0.5,
            agents: vec![AgentTrace {
                id: "ego".into(),
                controller: ControllerKind::Cooperative,
                path: "p".into(),
                footprint_radius: 1.0,
                rows: vec![row(0.0), row(0.5)],
            }],
            zones: vec![],
            planner: vec![],
            safety: vec![],
            collisions: vec![],
            termination: Termination::Horizon,
            end_time: 0.5,
        }
    }

    #[test]
    fn csv_uses_fixed_decimals() {
        let csv = log().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(
            lines[2],
            "0.500000,ego,4.000000,8.000000,0.000000,4.000000,0.000000,0.000000,plan"
        );
    }

    #[test]
    fn sidecar_round_trips() {
        let l = log();
        let back: EventLog = serde_json::from_str(&l.events_json()).unwrap();
        assert_eq!(back, l.events());
        assert!(l.events_json().contains("\"termination\": \"horizon\""));
    }
}
