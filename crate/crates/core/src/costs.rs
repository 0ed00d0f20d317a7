//! Trajectory costs and the global ensemble functional.
//!
//! The ensemble cost is the sum over agents of a singleton comfort cost
//! plus, for every ordered pair of agents, a pairwise term penalizing
//! short zone-clearance gaps. Each ordered pair carries half of the
//! symmetric pair penalty so the cost can be attributed per agent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{CollisionZone, Path};
use crate::trajectory::{stopping_distance, Crossing, Trajectory};
use crate::{AgentId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverType {
    Dynamic,
    Defensive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub w_v: f64,
    pub v_des: f64,
    pub w_at: f64,
    pub w_an: f64,
    pub w_clear: f64,
    pub t_clear_ref: f64,
    /// Clearance reference applied when this agent must yield but goes first.
    pub t_clear_ref_yield: f64,
    pub driver_type: DriverType,
}

impl CostParams {
    pub fn dynamic(v_des: f64) -> Self {
        CostParams {
            w_v: 1.0,
            v_des,
            w_at: 1.0,
            w_an: 0.1,
            w_clear: 20.0,
            t_clear_ref: 2.0,
            t_clear_ref_yield: 6.0,
            driver_type: DriverType::Dynamic,
        }
    }

    /// The defensive counterpart: 20% lower desired speed, doubled
    /// longitudinal-acceleration and clearance weights.
    pub fn as_defensive(&self) -> Self {
        if self.driver_type == DriverType::Defensive {
            return *self;
        }
        CostParams {
            v_des: self.v_des * 0.8,
            w_at: self.w_at * 2.0,
            w_clear: self.w_clear * 2.0,
            driver_type: DriverType::Defensive,
            ..*self
        }
    }

    pub fn with_driver(&self, driver: DriverType) -> Self {
        match driver {
            DriverType::Defensive => self.as_defensive(),
            DriverType::Dynamic => *self,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CostParams {
            w_v: self.w_v * factor,
            w_at: self.w_at * factor,
            w_an: self.w_an * factor,
            w_clear: self.w_clear * factor,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_v, self.w_at, self.w_an, self.w_clear];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(
                "cost weights must be finite and non-negative",
            ));
        }
        if !(self.t_clear_ref > 0.0) || self.t_clear_ref_yield < self.t_clear_ref {
            return Err(Error::invalid(
                "t_clear_ref must be positive and not exceed t_clear_ref_yield",
            ));
        }
        if !(self.v_des >= 0.0) {
            return Err(Error::invalid("v_des must be non-negative"));
        }
        Ok(())
    }
}

/// Horizon-normalized integral of speed deviation, tangential and normal
/// acceleration, by the trapezoidal rule over the dense samples.
pub fn singleton_cost(traj: &Trajectory, path: &Path, params: &CostParams) -> f64 {
    let integrand = |i: usize| {
        let x = &traj.samples[i];
        let a_n = x.v * x.v * path.curvature_at(x.s);
        params.w_v * (x.v - params.v_des).powi(2)
            + params.w_at * x.a * x.a
            + params.w_an * a_n * a_n
    };
    let n = traj.samples.len();
    if n < 2 {
        return integrand(0);
    }
    let mut acc = 0.0;
    let mut prev = integrand(0);
    for i in 1..n {
        let cur = integrand(i);
        acc += 0.5 * (prev + cur) * (traj.samples[i].t - traj.samples[i - 1].t);
        prev = cur;
    }
    let span = traj.samples[n - 1].t - traj.samples[0].t;
    acc / span
}

/// What the cost functional needs to know about one trajectory and one zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneView {
    pub crossing: Crossing,
    /// At horizon end, still before the zone and able to brake to a stop
    /// short of it.
    pub can_stop_before: bool,
    pub end_time: f64,
}

impl ZoneView {
    pub fn new(traj: &Trajectory, zone_interval: crate::geometry::Interval) -> Self {
        let crossing = traj.zone_crossing_times(zone_interval);
        let end = traj.end();
        let can_stop_before = crossing.enter.is_none()
            && end.s + stopping_distance(end, &traj.limits) < zone_interval.s_in;
        ZoneView {
            crossing,
            can_stop_before,
            end_time: end.t,
        }
    }

    fn exited(&self) -> bool {
        self.crossing.exit.is_some()
    }
}

fn hinge(reference: f64, gap: f64) -> f64 {
    (reference - gap).max(0.0).powi(2)
}

/// Clearance reference for `me` when it crosses first.
fn reference(zone: &CollisionZone, me: &str, params: &CostParams, first: bool) -> f64 {
    let other_has_priority = zone
        .priority
        .as_deref()
        .is_some_and(|p| p != me && zone.involves(p));
    if first && other_has_priority {
        params.t_clear_ref_yield
    } else {
        params.t_clear_ref
    }
}

/// Full (unhalved) pairwise penalty from agent `i`'s point of view, or
/// `None` when the two occupancy intervals overlap.
pub fn pairwise_from_views(
    zone: &CollisionZone,
    agent_i: &str,
    view_i: &ZoneView,
    view_j: &ZoneView,
    params_i: &CostParams,
) -> Option<f64> {
    let (ci, cj) = (view_i.crossing, view_j.crossing);
    match (ci.enter, cj.enter) {
        (Some(ei), Some(ej)) => {
            let i_first = ei < ej || (ei == ej && ci.exit.is_some_and(|x| x <= ej));
            let (first, second_enter) = if i_first { (ci, ej) } else { (cj, ei) };
            let exit_first = first.exit?;
            if exit_first > second_enter {
                return None;
            }
            let t_ref = reference(zone, agent_i, params_i, i_first);
            Some(params_i.w_clear * hinge(t_ref, second_enter - exit_first))
        }
        (Some(_), None) => one_sided(zone, agent_i, params_i, &ci, view_j, true),
        (None, Some(_)) => one_sided(zone, agent_i, params_i, &cj, view_i, false),
        (None, None) => Some(0.0),
    }
}

/// Only one agent enters within the horizon; `waiting` never does.
fn one_sided(
    zone: &CollisionZone,
    agent_i: &str,
    params_i: &CostParams,
    entered: &Crossing,
    waiting: &ZoneView,
    i_is_entering: bool,
) -> Option<f64> {
    if waiting.can_stop_before {
        return Some(0.0);
    }
    // The waiting agent enters after the horizon at the earliest.
    let exit = entered.exit?;
    let t_ref = reference(zone, agent_i, params_i, i_is_entering);
    Some(params_i.w_clear * hinge(t_ref, waiting.end_time - exit))
}

/// Pairwise clearance cost of `traj_i` against `traj_j` through `zone`.
///
/// `Ok(None)` flags an infeasible (colliding) pair.
pub fn pairwise_cost(
    agent_i: &str,
    traj_i: &Trajectory,
    agent_j: &str,
    traj_j: &Trajectory,
    zone: &CollisionZone,
    params: &CostParams,
) -> Result<Option<f64>> {
    let (Some(zi), Some(zj)) = (zone.interval_for(agent_i), zone.interval_for(agent_j)) else {
        return Err(Error::invalid(format!(
            "zone between {} and {} does not relate {agent_i} and {agent_j}",
            zone.agent_a, zone.agent_b
        )));
    };
    if agent_i == agent_j {
        return Err(Error::invalid("pairwise cost needs two distinct agents"));
    }
    let vi = ZoneView::new(traj_i, zi);
    let vj = ZoneView::new(traj_j, zj);
    Ok(pairwise_from_views(zone, agent_i, &vi, &vj, params))
}

/// Whether an agent's final state is acceptable with respect to one zone:
/// it must not be inside the zone, nor unable to stop before it, while the
/// partner has not yet left it.
pub fn final_state_safe(own: &ZoneView, partner: &ZoneView) -> bool {
    if partner.exited() {
        return true;
    }
    let inside = own.crossing.occupies_at_end();
    let committed = own.crossing.enter.is_none() && !own.can_stop_before;
    !(inside || committed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCost {
    /// `f64::INFINITY` when infeasible.
    pub total: f64,
    pub per_agent_singleton: BTreeMap<AgentId, f64>,
    pub per_pair: BTreeMap<(AgentId, AgentId), f64>,
    pub feasible: bool,
}

impl EnsembleCost {
    pub fn infeasible() -> Self {
        EnsembleCost {
            total: f64::INFINITY,
            per_agent_singleton: BTreeMap::new(),
            per_pair: BTreeMap::new(),
            feasible: false,
        }
    }

    /// Sum of the stored components.
    pub fn recomputed_total(&self) -> f64 {
        self.per_agent_singleton.values().sum::<f64>() + self.per_pair.values().sum::<f64>()
    }
}

/// Evaluates the global cost functional on one trajectory per agent.
pub fn ensemble_cost(
    trajectories: &BTreeMap<AgentId, Trajectory>,
    paths: &BTreeMap<AgentId, Path>,
    zones: &[CollisionZone],
    params: &BTreeMap<AgentId, CostParams>,
) -> Result<EnsembleCost> {
    for agent in params.keys() {
        if !trajectories.contains_key(agent) {
            return Err(Error::invalid(format!("no trajectory for agent {agent}")));
        }
    }
    let mut per_agent_singleton = BTreeMap::new();
    for (agent, traj) in trajectories {
        let path = paths
            .get(agent)
            .ok_or_else(|| Error::invalid(format!("no path for agent {agent}")))?;
        let p = params
            .get(agent)
            .ok_or_else(|| Error::invalid(format!("no cost parameters for agent {agent}")))?;
        per_agent_singleton.insert(agent.clone(), singleton_cost(traj, path, p));
    }
    let mut per_pair: BTreeMap<(AgentId, AgentId), f64> = BTreeMap::new();
    for zone in zones {
        let (a, b) = (&zone.agent_a, &zone.agent_b);
        let (Some(ta), Some(tb)) = (trajectories.get(a), trajectories.get(b)) else {
            return Err(Error::invalid(format!(
                "zone references unknown agent {a} or {b}"
            )));
        };
        let va = ZoneView::new(ta, zone.interval_a);
        let vb = ZoneView::new(tb, zone.interval_b);
        if !final_state_safe(&va, &vb) || !final_state_safe(&vb, &va) {
            return Ok(EnsembleCost::infeasible());
        }
        let (Some(ga), Some(gb)) = (
            pairwise_from_views(zone, a, &va, &vb, &params[a]),
            pairwise_from_views(zone, b, &vb, &va, &params[b]),
        ) else {
            return Ok(EnsembleCost::infeasible());
        };
        *per_pair.entry((a.clone(), b.clone())).or_default() += 0.5 * ga;
        *per_pair.entry((b.clone(), a.clone())).or_default() += 0.5 * gb;
    }
    let mut cost = EnsembleCost {
        total: 0.0,
        per_agent_singleton,
        per_pair,
        feasible: true,
    };
    cost.total = cost.recomputed_total();
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_path, find_collision_zones, Interval, Point};
    use crate::trajectory::{integrate, KinematicLimits, LongitudinalState, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn lim() -> KinematicLimits {
        KinematicLimits {
            v_max: 20.0,
            a_min: -8.0,
            a_max: 3.0,
            j_min: -5.0,
            j_max: 5.0,
        }
    }

    fn straight() -> Path {
        build_path(&[Point::new(0.0, 0.0), Point::new(400.0, 0.0)], 3.5, 0.5).unwrap()
    }

    fn cruise(v: f64, s0: f64, secs: usize) -> Trajectory {
        integrate(
            LongitudinalState::new(s0, v, 0.0, 0.0),
            &vec![0.0; secs],
            &lim(),
            TimeGrid::default(),
        )
    }

    fn only(f: impl FnOnce(&mut CostParams)) -> CostParams {
        let mut p = CostParams {
            w_v: 0.0,
            v_des: 10.0,
            w_at: 0.0,
            w_an: 0.0,
            w_clear: 0.0,
            t_clear_ref: 2.0,
            t_clear_ref_yield: 2.0,
            driver_type: DriverType::Dynamic,
        };
        f(&mut p);
        p
    }

    fn zone(ia: (f64, f64), ib: (f64, f64)) -> CollisionZone {
        CollisionZone {
            agent_a: "i".into(),
            agent_b: "j".into(),
            interval_a: Interval::new(ia.0, ia.1),
            interval_b: Interval::new(ib.0, ib.1),
            priority: None,
            reach: 2.0,
            co_directional: false,
        }
    }

    #[test]
    fn cruising_at_desired_speed_is_free() {
        assert_abs_diff_eq!(
            singleton_cost(
                &cruise(10.0, 0.0, 5),
                &straight(),
                &CostParams::dynamic(10.0)
            ),
            0.0
        );
    }

    #[test]
    fn normal_acceleration_on_arc() {
        let r = 20.0;
        let arc: Vec<Point> = (0..=3000)
            .map(|k| {
                let th = std::f64::consts::PI * k as f64 / 3000.0;
                Point::new(r * th.cos(), r * th.sin())
            })
            .collect();
        let path = build_path(&arc, 3.5, 0.5).unwrap();
        let p = only(|p| p.w_an = 1.0);
        // a_n = v^2 kappa = 100 * 0.05 = 5, squared 25.
        let c = singleton_cost(&cruise(10.0, 0.0, 5), &path, &p);
        assert!((c - 25.0).abs() < 0.25, "{c}");
    }

    #[test]
    fn standing_still_costs_squared_deviation() {
        let p = only(|p| p.w_v = 1.0);
        assert_abs_diff_eq!(
            singleton_cost(&cruise(0.0, 0.0, 4), &straight(), &p),
            100.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn clearance_gap_penalty() {
        // i crosses [20, 30] at 10 m/s: leaves at 3.0 s. j enters [42, 60] at 4.2 s.
        let ti = cruise(10.0, 0.0, 8);
        let tj = cruise(10.0, 0.0, 8);
        let z = zone((20.0, 30.0), (42.0, 60.0));
        let p = only(|p| p.w_clear = 1.0);
        let c = pairwise_cost("i", &ti, "j", &tj, &z, &p).unwrap().unwrap();
        // Oracle from dense sampling: first 1 ms samples crossing the bounds.
        let exit = (0..8000)
            .map(|k| k as f64 * 1e-3)
            .find(|t| 10.0 * t >= 30.0)
            .unwrap();
        let enter = (0..8000)
            .map(|k| k as f64 * 1e-3)
            .find(|t| 10.0 * t >= 42.0)
            .unwrap();
        assert_abs_diff_eq!(c, (2.0 - (enter - exit)).powi(2), epsilon = 1e-6);
        assert_abs_diff_eq!(c, 0.64, epsilon = 1e-9);
    }

    #[test]
    fn no_interaction_when_partner_stops_short() {
        let ti = cruise(10.0, 0.0, 8);
        let tj = integrate(
            LongitudinalState::new(0.0, 0.0, 0.0, 0.0),
            &[0.0; 8],
            &lim(),
            TimeGrid::default(),
        );
        let z = zone((20.0, 30.0), (42.0, 60.0));
        let p = only(|p| p.w_clear = 1.0);
        assert_eq!(
            pairwise_cost("i", &ti, "j", &tj, &z, &p).unwrap(),
            Some(0.0)
        );
    }

    #[test]
    fn overlapping_occupancy_is_infeasible() {
        let ti = cruise(10.0, 0.0, 8);
        let tj = cruise(10.0, 0.0, 8);
        let z = zone((20.0, 30.0), (25.0, 40.0));
        let p = only(|p| p.w_clear = 1.0);
        assert_eq!(pairwise_cost("i", &ti, "j", &tj, &z, &p).unwrap(), None);
        assert!(pairwise_cost("i", &ti, "x", &tj, &z, &p).is_err());
    }

    #[test]
    fn yielding_agent_pays_larger_reference_when_first() {
        let ti = cruise(10.0, 0.0, 10);
        let tj = cruise(10.0, 0.0, 10);
        let mut z = zone((20.0, 30.0), (50.0, 60.0));
        let p = only(|p| {
            p.w_clear = 1.0;
            p.t_clear_ref_yield = 4.0;
        });
        // Gap 2 s: free under the plain reference.
        assert_eq!(
            pairwise_cost("i", &ti, "j", &tj, &z, &p).unwrap(),
            Some(0.0)
        );
        z.priority = Some("j".into());
        assert_abs_diff_eq!(
            pairwise_cost("i", &ti, "j", &tj, &z, &p).unwrap().unwrap(),
            4.0
        );
        // The priority holder going second is unaffected.
        assert_eq!(
            pairwise_cost("j", &tj, "i", &ti, &z, &p).unwrap(),
            Some(0.0)
        );
    }

    fn two_agents(
        zones: Vec<CollisionZone>,
    ) -> (
        BTreeMap<AgentId, Trajectory>,
        BTreeMap<AgentId, Path>,
        Vec<CollisionZone>,
    ) {
        let mut t = BTreeMap::new();
        t.insert("i".to_string(), cruise(10.0, 0.0, 8));
        t.insert("j".to_string(), cruise(8.0, 0.0, 8));
        let mut p = BTreeMap::new();
        p.insert("i".to_string(), straight());
        p.insert("j".to_string(), straight());
        (t, p, zones)
    }

    #[test]
    fn ensemble_without_zones_sums_singletons() {
        let (t, p, z) = two_agents(vec![]);
        let params: BTreeMap<_, _> = [
            ("i".to_string(), CostParams::dynamic(12.0)),
            ("j".to_string(), CostParams::dynamic(12.0)),
        ]
        .into();
        let c = ensemble_cost(&t, &p, &z, &params).unwrap();
        let si = singleton_cost(&t["i"], &p["i"], &params["i"]);
        let sj = singleton_cost(&t["j"], &p["j"], &params["j"]);
        assert_abs_diff_eq!(c.total, si + sj, epsilon = 1e-12);
        assert!(c.feasible);
        assert!(c.per_pair.is_empty());
    }

    #[test]
    fn ensemble_decomposes_into_halved_ordered_pairs() {
        let z = zone((20.0, 30.0), (42.0, 60.0));
        let (t, p, zones) = two_agents(vec![z.clone()]);
        let params: BTreeMap<_, _> = [
            (
                "i".to_string(),
                only(|p| {
                    p.w_clear = 1.0;
                    p.w_v = 1.0;
                }),
            ),
            (
                "j".to_string(),
                only(|p| {
                    p.w_clear = 3.0;
                    p.w_v = 1.0;
                }),
            ),
        ]
        .into();
        let c = ensemble_cost(&t, &p, &zones, &params).unwrap();
        let gij = pairwise_cost("i", &t["i"], "j", &t["j"], &z, &params["i"])
            .unwrap()
            .unwrap();
        let gji = pairwise_cost("j", &t["j"], "i", &t["i"], &z, &params["j"])
            .unwrap()
            .unwrap();
        let expected = singleton_cost(&t["i"], &p["i"], &params["i"])
            + singleton_cost(&t["j"], &p["j"], &params["j"])
            + 0.5 * gij
            + 0.5 * gji;
        assert_abs_diff_eq!(c.total, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(c.total, c.recomputed_total(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.per_pair[&("i".to_string(), "j".to_string())], 0.5 * gij);
    }

    #[test]
    fn ensemble_requires_every_declared_agent() {
        let (mut t, p, z) = two_agents(vec![]);
        t.remove("j");
        let params: BTreeMap<_, _> = [
            ("i".to_string(), CostParams::dynamic(12.0)),
            ("j".to_string(), CostParams::dynamic(12.0)),
        ]
        .into();
        assert!(ensemble_cost(&t, &p, &z, &params).is_err());
    }

    #[test]
    fn unsafe_final_state_discards_ensemble() {
        // j ends 2 m before its zone at 8 m/s: cannot stop, i never leaves.
        let mut z = zone((300.0, 320.0), (66.0, 80.0));
        z.agent_a = "i".into();
        let (t, p, _) = two_agents(vec![]);
        let params: BTreeMap<_, _> = [
            ("i".to_string(), CostParams::dynamic(10.0)),
            ("j".to_string(), CostParams::dynamic(10.0)),
        ]
        .into();
        let c = ensemble_cost(&t, &p, &[z], &params).unwrap();
        assert!(!c.feasible);
        assert!(c.total.is_infinite());
    }

    #[test]
    fn zones_from_geometry_relate_agents() {
        let a = build_path(&[Point::new(-50.0, 0.0), Point::new(50.0, 0.0)], 3.5, 0.5).unwrap();
        let b = build_path(&[Point::new(0.0, -50.0), Point::new(0.0, 50.0)], 3.5, 0.5).unwrap();
        let z = find_collision_zones(&a, &b, 1.0, 1.0)
            .remove(0)
            .with_agents("i", "j");
        let ti = cruise(10.0, 0.0, 10);
        let tj = integrate(
            LongitudinalState::new(0.0, 5.0, 0.0, 0.0),
            &[0.0; 10],
            &lim(),
            TimeGrid::default(),
        );
        let p = CostParams::dynamic(10.0);
        // i clears [47.5, 52.5] by 5.25 s, j enters at 47.5 / 5 = 9.5 s.
        assert_eq!(
            pairwise_cost("i", &ti, "j", &tj, &z, &p).unwrap(),
            Some(0.0)
        );
    }

    #[test]
    fn defensive_preset_differs_only_in_weights() {
        let d = CostParams::dynamic(10.0);
        let f = d.as_defensive();
        assert_abs_diff_eq!(f.v_des, 8.0);
        assert_eq!(f.w_at, 2.0 * d.w_at);
        assert_eq!(f.w_clear, 2.0 * d.w_clear);
        assert_eq!(f.w_an, d.w_an);
        assert_eq!(f.as_defensive(), f);
        assert!(d.validate().is_ok());
    }
}
