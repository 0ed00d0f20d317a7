//! Analytic RSS-style safety layer.
//!
//! A state is safe with respect to a collision zone when the ego can still
//! stop before the zone under worst-case reaction, when it keeps a safe
//! following distance to a vehicle ahead in a shared lane, or when its
//! pursued plan leaves the zone before the other vehicle could physically
//! reach it. The monitor overrides the planner with full braking as soon as
//! any zone is unsafe and latches until safety is restored.

use serde::{Deserialize, Serialize};

use crate::geometry::CollisionZone;
use crate::trajectory::{KinematicLimits, LongitudinalState, TimeGrid, Trajectory};
use crate::{AgentId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyParams {
    /// Reaction time [s].
    pub rho: f64,
    /// Worst-case acceleration of any vehicle during reaction [m/s^2].
    pub a_max_accel: f64,
    /// Braking the ego can always deliver [m/s^2], positive.
    pub b_min_ego: f64,
    /// Hardest braking of other vehicles [m/s^2], positive.
    pub b_max_other: f64,
}

impl Default for SafetyParams {
    fn default() -> Self {
        SafetyParams {
            rho: 0.1,
            a_max_accel: 2.0,
            b_min_ego: 6.0,
            b_max_other: 8.0,
        }
    }
}

impl SafetyParams {
    pub fn validate(&self, ego_limits: Option<&KinematicLimits>) -> Result<()> {
        if !(self.rho > 0.0
            && self.a_max_accel > 0.0
            && self.b_min_ego > 0.0
            && self.b_max_other > 0.0)
        {
            return Err(Error::invalid("safety parameters must be positive"));
        }
        if let Some(l) = ego_limits {
            if self.b_min_ego > -l.a_min {
                return Err(Error::invalid(format!(
                    "b_min_ego {} exceeds the braking limit {}",
                    self.b_min_ego, -l.a_min
                )));
            }
        }
        Ok(())
    }

    /// Worst-case distance to standstill: accelerate at `a_max_accel` for
    /// the reaction time, then brake at `b_min_ego`.
    pub fn worst_case_stopping_distance(&self, v: f64) -> f64 {
        let rho = self.rho;
        let v_react = v + rho * self.a_max_accel;
        v * rho + 0.5 * self.a_max_accel * rho * rho + v_react * v_react / (2.0 * self.b_min_ego)
    }

    /// Minimum safe gap when following a vehicle at `v_front` with speed `v_rear`.
    pub fn safe_following_distance(&self, v_rear: f64, v_front: f64) -> f64 {
        let d = self.worst_case_stopping_distance(v_rear)
            - v_front * v_front / (2.0 * self.b_max_other);
        d.max(0.0)
    }

    /// Earliest time (relative) at which a vehicle `distance` away at speed
    /// `v` can cover that distance with full acceleration.
    pub fn earliest_arrival(&self, v: f64, distance: f64) -> f64 {
        if distance <= 0.0 {
            return 0.0;
        }
        let a = self.a_max_accel;
        (-v + (v * v + 2.0 * a * distance).sqrt()) / a
    }

    /// Latest time (relative) by which a vehicle `distance` short of a zone
    /// exit has left it even under the hardest braking others may apply, or
    /// `None` when it could stop before the exit.
    pub fn latest_exit(&self, v: f64, distance: f64) -> Option<f64> {
        if distance <= 0.0 {
            return Some(0.0);
        }
        let b = self.b_max_other;
        let disc = v * v - 2.0 * b * distance;
        (disc >= 0.0).then(|| (v - disc.sqrt()) / b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SafetyCase {
    CanStop,
    LongitudinalGap,
    ClearsFirst,
    /// One of the two vehicles has already left the zone.
    NoConflict,
    Unsafe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub safe: bool,
    pub case: SafetyCase,
    /// Meters for distance cases, seconds for `ClearsFirst`.
    pub margin: f64,
}

impl SafetyVerdict {
    fn new(case: SafetyCase, margin: f64) -> Self {
        SafetyVerdict {
            safe: case != SafetyCase::Unsafe,
            case,
            margin,
        }
    }
}

/// Evaluates the ego's safety with respect to one zone shared with `other`.
///
/// `pursued_plan` must be the ego's plan from (at or before) `ego.t`.
pub fn check_safe(
    ego_id: &str,
    ego: &LongitudinalState,
    other_id: &str,
    other: &LongitudinalState,
    zone: &CollisionZone,
    pursued_plan: &Trajectory,
    params: &SafetyParams,
) -> Result<SafetyVerdict> {
    let (Some(ego_zone), Some(other_zone)) =
        (zone.interval_for(ego_id), zone.interval_for(other_id))
    else {
        return Err(Error::invalid(format!(
            "zone between {} and {} does not involve {ego_id} and {other_id}",
            zone.agent_a, zone.agent_b
        )));
    };
    if ego_id == other_id {
        return Err(Error::invalid("safety check needs two distinct agents"));
    }
    if ego.s >= ego_zone.s_out || other.s >= other_zone.s_out {
        return Ok(SafetyVerdict::new(SafetyCase::NoConflict, f64::INFINITY));
    }

    let to_zone = ego_zone.s_in - ego.s;
    let stop = params.worst_case_stopping_distance(ego.v);
    let mut worst_margin = to_zone - stop;
    if to_zone > 0.0 && stop <= to_zone {
        return Ok(SafetyVerdict::new(SafetyCase::CanStop, to_zone - stop));
    }

    if zone.co_directional {
        let ego_progress = ego.s - ego_zone.s_in;
        let other_progress = other.s - other_zone.s_in;
        if other_progress >= 0.0 && other_progress > ego_progress {
            let gap = other_progress - ego_progress - zone.reach;
            let margin = gap - params.safe_following_distance(ego.v, other.v);
            if margin >= 0.0 {
                return Ok(SafetyVerdict::new(SafetyCase::LongitudinalGap, margin));
            }
            worst_margin = worst_margin.max(margin);
        }
    }

    let exit = pursued_plan.zone_crossing_times(ego_zone).exit;
    let other_entry = other.t + params.earliest_arrival(other.v, other_zone.s_in - other.s);
    if let Some(exit) = exit {
        if exit < other_entry {
            return Ok(SafetyVerdict::new(
                SafetyCase::ClearsFirst,
                other_entry - exit,
            ));
        }
    }
    Ok(SafetyVerdict::new(
        SafetyCase::Unsafe,
        worst_margin.min(0.0),
    ))
}

/// Full deceleration at `a_min` from `ego` down to standstill.
pub fn appropriate_response(ego: &LongitudinalState, limits: &KinematicLimits) -> Trajectory {
    let start = LongitudinalState {
        a: if ego.v > 0.0 { limits.a_min } else { 0.0 },
        ..*ego
    };
    let grid = TimeGrid {
        action_dt: 1.0,
        dt: 0.01,
    };
    let stop_time = start.v / -limits.a_min;
    let n = (stop_time / grid.action_dt - 1e-12).ceil().max(0.0) as usize;
    let tr = crate::trajectory::integrate(start, &vec![0.0; n], limits, grid);
    Trajectory {
        path_id: String::new(),
        ..tr
    }
}

/// Monitor output for one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonitorDecision {
    PassThrough,
    Override,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SafetyEventKind {
    Trigger,
    Release,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyEvent {
    pub t: f64,
    pub agent: AgentId,
    pub kind: SafetyEventKind,
    /// Partner and verdict of the zone that triggered (empty on release).
    pub partner: Option<AgentId>,
    pub case: SafetyCase,
    pub margin: f64,
}

/// Another agent's state as seen by the monitor.
#[derive(Debug, Clone, Copy)]
pub struct Observed<'a> {
    pub id: &'a str,
    pub state: LongitudinalState,
}

/// Per-ego latch around [`check_safe`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SafetyMonitor {
    latched: bool,
    pub events: Vec<SafetyEvent>,
}

impl SafetyMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_latched(&self) -> bool {
        self.latched
    }

    /// The least safe verdict over all zones the ego shares with `others`.
    pub fn worst_verdict(
        ego_id: &str,
        ego: &LongitudinalState,
        others: &[Observed<'_>],
        zones: &[CollisionZone],
        pursued_plan: &Trajectory,
        params: &SafetyParams,
    ) -> Option<(AgentId, SafetyVerdict)> {
        let mut worst: Option<(AgentId, SafetyVerdict)> = None;
        for zone in zones.iter().filter(|z| z.involves(ego_id)) {
            let partner = zone.partner_of(ego_id).unwrap();
            let Some(other) = others.iter().find(|o| o.id == partner) else {
                continue;
            };
            let Ok(v) = check_safe(
                ego_id,
                ego,
                partner,
                &other.state,
                zone,
                pursued_plan,
                params,
            ) else {
                continue;
            };
            let replace = match &worst {
                None => true,
                Some((_, w)) => (w.safe && !v.safe) || (w.safe == v.safe && v.margin < w.margin),
            };
            if replace {
                worst = Some((partner.clone(), v));
            }
        }
        worst
    }

    /// One 100 Hz tick. Overrides on any unsafe verdict; once latched, the
    /// override holds until a safe verdict coincides with a planner step.
    #[allow(clippy::too_many_arguments)]
    pub fn tick(
        &mut self,
        t: f64,
        ego_id: &str,
        ego: &LongitudinalState,
        others: &[Observed<'_>],
        zones: &[CollisionZone],
        pursued_plan: &Trajectory,
        params: &SafetyParams,
        at_planner_step: bool,
    ) -> MonitorDecision {
        let worst = Self::worst_verdict(ego_id, ego, others, zones, pursued_plan, params);
        match worst {
            Some((partner, v)) if !v.safe => {
                if !self.latched {
                    self.latched = true;
                    self.events.push(SafetyEvent {
                        t,
                        agent: ego_id.to_string(),
                        kind: SafetyEventKind::Trigger,
                        partner: Some(partner),
                        case: v.case,
                        margin: v.margin,
                    });
                }
                MonitorDecision::Override
            }
            other => {
                if self.latched && at_planner_step {
                    self.latched = false;
                    let (partner, case, margin) = match other {
                        Some((p, v)) => (Some(p), v.case, v.margin),
                        None => (None, SafetyCase::NoConflict, f64::INFINITY),
                    };
                    self.events.push(SafetyEvent {
                        t,
                        agent: ego_id.to_string(),
                        kind: SafetyEventKind::Release,
                        partner,
                        case,
                        margin,
                    });
                }
                if self.latched {
                    MonitorDecision::Override
                } else {
                    MonitorDecision::PassThrough
                }
            }
        }
    }
}

/// Whether committing to `plan` keeps the ego provably safe until `until`
/// against every partner, judged from the partners' current states. Future
/// states along the plan must either be able to stop before the zone, have
/// left it, leave it before the partner could arrive, or come after the
/// partner is certain to have left.
pub fn plan_keeps_safe(
    ego_id: &str,
    plan: &Trajectory,
    now: f64,
    until: f64,
    others: &[Observed<'_>],
    zones: &[CollisionZone],
    params: &SafetyParams,
) -> bool {
    let step = 0.01;
    for zone in zones.iter().filter(|z| z.involves(ego_id)) {
        let partner = zone.partner_of(ego_id).unwrap();
        let Some(other) = others.iter().find(|o| o.id == partner) else {
            continue;
        };
        let other_zone = zone.interval_for(partner).unwrap();
        if other.state.s >= other_zone.s_out {
            continue;
        }
        let ego_zone = zone.interval_for(ego_id).unwrap();
        if let Some(exit) = plan.zone_crossing_times(ego_zone).exit {
            let other_entry = other.state.t
                + params.earliest_arrival(other.state.v, other_zone.s_in - other.state.s);
            if exit < other_entry {
                continue;
            }
        }
        let partner_gone = params
            .latest_exit(other.state.v.max(0.0), other_zone.s_out - other.state.s)
            .map_or(f64::INFINITY, |dt| other.state.t + dt);
        let n = ((until - now) / step).round().max(0.0) as usize;
        for k in 0..=n {
            let x = plan.state_at(now + k as f64 * step);
            if x.s >= ego_zone.s_out || x.t >= partner_gone {
                break;
            }
            let to_zone = ego_zone.s_in - x.s;
            if to_zone <= 0.0 || params.worst_case_stopping_distance(x.v) > to_zone {
                // Following distance only counts at the current instant.
                if k == 0 {
                    let v = check_safe(ego_id, &x, partner, &other.state, zone, plan, params);
                    if matches!(v, Ok(v) if v.safe) {
                        continue;
                    }
                }
                return false;
            }
        }
    }
    true
}
