//! Cooperative planning core.
//!
//! Each planning step samples candidate trajectories for every agent,
//! searches the joint ensembles for the one minimizing the global cost, and
//! weighs that plan against a defensive stop-before-the-zone maneuver by the
//! current trust `p_go` that all agents follow the optimum. Several route
//! hypotheses for the other agents are mixed by their probabilities while the
//! ego's next committed action is kept common to all of them.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{
    ensemble_cost, final_state_safe, pairwise_from_views, singleton_cost, CostParams, DriverType,
    EnsembleCost, ZoneView,
};
use crate::geometry::{CollisionZone, Interval, Path};
use crate::par;
use crate::safety::{plan_keeps_safe, Observed, SafetyParams};
use crate::trajectory::{
    advance, integrate, sample_trajectory_set, KinematicLimits, LongitudinalState, SamplingSpec,
    TimeGrid, Trajectory,
};
use crate::{AgentId, Error, Result};

/// Who traverses one collision zone first; `None` when neither agent
/// reaches it within the horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneOrder {
    pub agent_a: AgentId,
    pub agent_b: AgentId,
    pub first: Option<AgentId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomotopyClass {
    pub zones: Vec<ZoneOrder>,
}

impl HomotopyClass {
    /// True when some zone is traversed in opposite orders. Zones left
    /// untouched by either class do not count.
    pub fn conflicts_with(&self, other: &HomotopyClass) -> bool {
        self.zones.iter().any(|x| {
            other.zones.iter().any(|y| {
                x.agent_a == y.agent_a
                    && x.agent_b == y.agent_b
                    && matches!((&x.first, &y.first), (Some(p), Some(q)) if p != q)
            })
        })
    }

    /// Compact label such as `ego-first` or `untouched`, one per zone.
    pub fn label(&self) -> String {
        if self.zones.is_empty() {
            return "none".into();
        }
        self.zones
            .iter()
            .map(|z| match &z.first {
                Some(a) => format!("{a}-first"),
                None => "untouched".into(),
            })
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub trajectories: BTreeMap<AgentId, Trajectory>,
    pub cost: EnsembleCost,
    pub homotopy: HomotopyClass,
}

/// Labels each zone with the agent whose occupancy ends first.
pub fn classify_homotopy(
    trajectories: &BTreeMap<AgentId, Trajectory>,
    zones: &[CollisionZone],
) -> Result<HomotopyClass> {
    let mut out = Vec::with_capacity(zones.len());
    for zone in zones {
        let (Some(ta), Some(tb)) = (
            trajectories.get(&zone.agent_a),
            trajectories.get(&zone.agent_b),
        ) else {
            return Err(Error::invalid(format!(
                "ensemble lacks a trajectory for {} or {}",
                zone.agent_a, zone.agent_b
            )));
        };
        let ca = ta.zone_crossing_times(zone.interval_a);
        let cb = tb.zone_crossing_times(zone.interval_b);
        let first = match (ca.enter, cb.enter) {
            (None, None) => None,
            (Some(_), None) => Some(zone.agent_a.clone()),
            (None, Some(_)) => Some(zone.agent_b.clone()),
            (Some(ea), Some(eb)) => {
                let xa = ca.exit.unwrap_or(f64::INFINITY);
                let xb = cb.exit.unwrap_or(f64::INFINITY);
                let a_first = xa < xb || (xa == xb && ea < eb);
                let (exit_first, enter_second) = if a_first { (xa, eb) } else { (xb, ea) };
                if exit_first > enter_second {
                    return Err(Error::Contract(format!(
                        "{} and {} occupy their collision zone simultaneously",
                        zone.agent_a, zone.agent_b
                    )));
                }
                Some(if a_first {
                    zone.agent_a.clone()
                } else {
                    zone.agent_b.clone()
                })
            }
        };
        out.push(ZoneOrder {
            agent_a: zone.agent_a.clone(),
            agent_b: zone.agent_b.clone(),
            first,
        });
    }
    Ok(HomotopyClass { zones: out })
}

struct ZoneSlot<'a> {
    zone: &'a CollisionZone,
    a: usize,
    b: usize,
    views_a: Vec<ZoneView>,
    views_b: Vec<ZoneView>,
    params_a: CostParams,
    params_b: CostParams,
}

/// Per-candidate precomputation so a joint combination costs only table
/// lookups and the pairwise terms.
struct ComboTable<'a> {
    agents: Vec<&'a AgentId>,
    singleton: Vec<Vec<f64>>,
    slots: Vec<ZoneSlot<'a>>,
}

impl<'a> ComboTable<'a> {
    fn new(
        candidates: &'a BTreeMap<AgentId, Vec<Trajectory>>,
        paths: &BTreeMap<AgentId, Path>,
        zones: &'a [CollisionZone],
        params: &BTreeMap<AgentId, CostParams>,
    ) -> Result<Self> {
        let agents: Vec<&AgentId> = candidates.keys().collect();
        let mut singleton = Vec::with_capacity(agents.len());
        for (agent, list) in candidates {
            if list.is_empty() {
                return Err(Error::invalid(format!(
                    "agent {agent} has no candidate trajectories"
                )));
            }
            let path = paths
                .get(agent)
                .ok_or_else(|| Error::invalid(format!("no path for agent {agent}")))?;
            let p = params
                .get(agent)
                .ok_or_else(|| Error::invalid(format!("no cost parameters for agent {agent}")))?;
            singleton.push(par::map_slice(list, |t| singleton_cost(t, path, p)));
        }
        let index = |id: &AgentId| agents.iter().position(|a| *a == id);
        let mut slots = Vec::with_capacity(zones.len());
        for zone in zones {
            let (Some(a), Some(b)) = (index(&zone.agent_a), index(&zone.agent_b)) else {
                return Err(Error::invalid(format!(
                    "zone references agent without candidates: {} or {}",
                    zone.agent_a, zone.agent_b
                )));
            };
            let views_a = par::map_slice(&candidates[&zone.agent_a], |t| {
                ZoneView::new(t, zone.interval_a)
            });
            let views_b = par::map_slice(&candidates[&zone.agent_b], |t| {
                ZoneView::new(t, zone.interval_b)
            });
            slots.push(ZoneSlot {
                zone,
                a,
                b,
                views_a,
                views_b,
                params_a: params[&zone.agent_a],
                params_b: params[&zone.agent_b],
            });
        }
        Ok(ComboTable {
            agents,
            singleton,
            slots,
        })
    }

    fn sizes(&self) -> Vec<usize> {
        self.singleton.iter().map(Vec::len).collect()
    }

    fn cost(&self, combo: &[usize]) -> Option<f64> {
        let mut total: f64 = combo
            .iter()
            .enumerate()
            .map(|(k, &c)| self.singleton[k][c])
            .sum();
        for slot in &self.slots {
            let va = &slot.views_a[combo[slot.a]];
            let vb = &slot.views_b[combo[slot.b]];
            if !final_state_safe(va, vb) || !final_state_safe(vb, va) {
                return None;
            }
            let ga = pairwise_from_views(slot.zone, &slot.zone.agent_a, va, vb, &slot.params_a)?;
            let gb = pairwise_from_views(slot.zone, &slot.zone.agent_b, vb, va, &slot.params_b)?;
            total += 0.5 * (ga + gb);
        }
        Some(total)
    }

    fn ensemble(
        &self,
        combo: &[usize],
        candidates: &BTreeMap<AgentId, Vec<Trajectory>>,
        paths: &BTreeMap<AgentId, Path>,
        zones: &[CollisionZone],
        params: &BTreeMap<AgentId, CostParams>,
    ) -> Result<TrajectoryEnsemble> {
        let trajectories: BTreeMap<AgentId, Trajectory> = self
            .agents
            .iter()
            .zip(combo)
            .map(|(a, &c)| ((*a).clone(), candidates[*a][c].clone()))
            .collect();
        let cost = ensemble_cost(&trajectories, paths, zones, params)?;
        let homotopy = classify_homotopy(&trajectories, zones)?;
        Ok(TrajectoryEnsemble {
            trajectories,
            cost,
            homotopy,
        })
    }
}

fn decode(mut index: usize, sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for k in (0..sizes.len()).rev() {
        out[k] = index % sizes[k];
        index /= sizes[k];
    }
    out
}

/// Joint candidate indices in lexicographic order: the whole cross product
/// when it fits the budget, otherwise `budget` seeded draws (always
/// including the all-first combination).
fn combinations(sizes: &[usize], budget: usize, seed: u64) -> Vec<Vec<usize>> {
    let total = sizes.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
    if let Some(total) = total.filter(|&t| t <= budget) {
        return (0..total).map(|i| decode(i, sizes)).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = BTreeSet::new();
    set.insert(vec![0; sizes.len()]);
    let mut attempts = 0;
    while set.len() < budget && attempts < budget.saturating_mul(4) {
        set.insert(
            sizes
                .iter()
                .map(|&n| rng.gen_range(0..n))
                .collect::<Vec<_>>(),
        );
        attempts += 1;
    }
    set.into_iter().collect()
}

/// Seeded sampled search for the minimum-cost feasible ensemble. Ties go to
/// the lexicographically smallest candidate indices in agent-id order.
pub fn find_global_optimum(
    candidates: &BTreeMap<AgentId, Vec<Trajectory>>,
    paths: &BTreeMap<AgentId, Path>,
    zones: &[CollisionZone],
    params: &BTreeMap<AgentId, CostParams>,
    budget: usize,
    seed: u64,
) -> Result<Option<TrajectoryEnsemble>> {
    if budget == 0 {
        return Err(Error::invalid("ensemble budget must be at least 1"));
    }
    let table = ComboTable::new(candidates, paths, zones, params)?;
    let combos = combinations(&table.sizes(), budget, seed);
    match par::argmin_range(combos.len(), |i| table.cost(&combos[i])) {
        None => Ok(None),
        Some((i, _)) => table
            .ensemble(&combos[i], candidates, paths, zones, params)
            .map(Some),
    }
}

/// For each candidate of agent `pivot`, the best feasible completion by the
/// other agents' candidates.
fn best_per_candidate(
    table: &ComboTable<'_>,
    pivot: usize,
    budget: usize,
    seed: u64,
) -> Vec<Option<(f64, Vec<usize>)>> {
    let sizes = table.sizes();
    let mut rest_sizes = sizes.clone();
    rest_sizes.remove(pivot);
    let per = (budget / sizes[pivot]).max(1);
    let rest = combinations(&rest_sizes, per, seed);
    par::map_range(sizes[pivot], |e| {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for r in &rest {
            let mut combo = r.clone();
            combo.insert(pivot, e);
            if let Some(c) = table.cost(&combo) {
                if best.as_ref().is_none_or(|(b, _)| c < *b) {
                    best = Some((c, combo));
                }
            }
        }
        best
    })
}

/// Snapshot of one agent as seen by a planner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentSnapshot {
    pub state: LongitudinalState,
    pub limits: KinematicLimits,
    pub params: CostParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub t: f64,
    pub agents: BTreeMap<AgentId, AgentSnapshot>,
    pub grid: TimeGrid,
}

impl Scene {
    fn params(&self) -> BTreeMap<AgentId, CostParams> {
        self.agents
            .iter()
            .map(|(k, a)| (k.clone(), a.params))
            .collect()
    }

    fn agent(&self, id: &str) -> Result<&AgentSnapshot> {
        self.agents
            .get(id)
            .ok_or_else(|| Error::invalid(format!("agent {id} is not in the scene")))
    }
}

/// One hypothesis of which path every agent follows.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteHypothesis {
    pub id: String,
    pub probability: f64,
    pub paths: BTreeMap<AgentId, Path>,
    pub zones: Vec<CollisionZone>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensingEps {
    pub position: f64,
    pub velocity: f64,
}

impl Default for SensingEps {
    fn default() -> Self {
        SensingEps {
            position: 0.5,
            velocity: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustParams {
    pub initial: f64,
    pub rise_factor: f64,
    /// Absolute slack added to the relative cost-rise threshold so that
    /// near-zero costs do not register noise as a rise.
    pub rise_floor: f64,
    pub gate: f64,
    pub decel_threshold: f64,
    /// Acceleration excess over the planned value that counts as the
    /// second agent pushing forward [m/s^2].
    pub accel_tolerance: f64,
}

impl Default for TrustParams {
    fn default() -> Self {
        TrustParams {
            initial: 0.5,
            rise_factor: 1.5,
            rise_floor: 1.0,
            gate: 0.95,
            decel_threshold: 3.0,
            accel_tolerance: 1.0,
        }
    }
}

impl TrustParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.initial) || !unit(self.gate) {
            return Err(Error::invalid(
                "trust initial value and gate must lie in (0, 1)",
            ));
        }
        if !(self.rise_factor >= 1.0) || !(self.rise_floor >= 0.0) {
            return Err(Error::invalid(
                "rise factor must be >= 1 and rise floor >= 0",
            ));
        }
        if !(self.decel_threshold > 0.0) || !(self.accel_tolerance >= 0.0) {
            return Err(Error::invalid("deceleration threshold must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Candidate trajectories sampled per agent and step.
    pub candidates: usize,
    /// Joint combinations evaluated per optimization.
    pub budget: usize,
    pub jerk_values: Vec<f64>,
    pub sensing_eps: SensingEps,
    pub trust: TrustParams,
    /// Re-run the driver-type and sensing-corner check on the first step and
    /// after every homotopy reset.
    pub marginal_check: bool,
    /// Drop ego candidates that could not be kept provably safe until the
    /// next commitment takes effect.
    pub safety_filter: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            candidates: 80,
            budget: 6400,
            jerk_values: vec![-2.0, -1.0, -0.5, 0.0, 0.5, 1.0],
            sensing_eps: SensingEps::default(),
            trust: TrustParams::default(),
            marginal_check: true,
            safety_filter: true,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || self.budget == 0 {
            return Err(Error::validation(
                "planner",
                "candidates and budget must be at least 1",
            ));
        }
        if self.jerk_values.is_empty() || self.jerk_values.iter().any(|j| !j.is_finite()) {
            return Err(Error::validation(
                "planner.jerk_values",
                "must be a non-empty list of finite values",
            ));
        }
        if !(self.sensing_eps.position >= 0.0 && self.sensing_eps.velocity >= 0.0) {
            return Err(Error::validation(
                "planner.sensing_eps",
                "must be non-negative",
            ));
        }
        self.trust
            .validate()
            .map_err(|e| Error::validation("planner.trust", e.to_string()))
    }
}

pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_agent(
    snap: &AgentSnapshot,
    grid: TimeGrid,
    config: &PlannerConfig,
    intervals: usize,
    seed: u64,
    prefix: &[f64],
) -> Result<Vec<Trajectory>> {
    sample_trajectory_set(
        snap.state,
        &snap.limits,
        grid,
        &SamplingSpec {
            horizon: intervals as f64 * grid.action_dt,
            jerk_values: &config.jerk_values,
            max_count: config.candidates,
            seed,
            prefix,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub unambiguous: bool,
    pub classes: Vec<HomotopyClass>,
    /// Corner cases without any feasible ensemble.
    pub skipped: usize,
    pub evaluated: usize,
}

/// Re-optimizes under every assignment of `drivers` to the agents crossed
/// with the position/velocity corners of the sensing bounds and collects the
/// optimal homotopy classes.
pub fn marginal_case_check(
    scene: &Scene,
    route: &RouteHypothesis,
    config: &PlannerConfig,
    drivers: &[DriverType],
    intervals: usize,
    seed: u64,
) -> Result<MarginalReport> {
    if scene.agents.len() < 2 {
        return Err(Error::invalid(
            "marginal-case check needs at least two agents",
        ));
    }
    if drivers.is_empty() {
        return Err(Error::invalid(
            "marginal-case check needs at least one driver type",
        ));
    }
    let ids: Vec<&AgentId> = scene.agents.keys().collect();
    let n = ids.len();
    let offsets = |eps: f64| {
        if eps > 0.0 {
            vec![-eps, eps]
        } else {
            vec![0.0]
        }
    };
    let ds = offsets(config.sensing_eps.position);
    let dv = offsets(config.sensing_eps.velocity);
    let per_agent: Vec<(f64, f64)> = ds
        .iter()
        .flat_map(|&a| dv.iter().map(move |&b| (a, b)))
        .collect();

    let driver_count = drivers.len().pow(n as u32);
    let corner_count = per_agent.len().pow(n as u32);
    let mut classes: Vec<HomotopyClass> = Vec::new();
    let mut skipped = 0;
    for d in 0..driver_count {
        let assignment = decode(d, &vec![drivers.len(); n]);
        for c in 0..corner_count {
            let corner = decode(c, &vec![per_agent.len(); n]);
            let mut candidates = BTreeMap::new();
            let mut params = BTreeMap::new();
            for (k, id) in ids.iter().enumerate() {
                let snap = &scene.agents[*id];
                let (ds, dv) = per_agent[corner[k]];
                let perturbed = AgentSnapshot {
                    state: LongitudinalState {
                        s: snap.state.s + ds,
                        v: (snap.state.v + dv).clamp(0.0, snap.limits.v_max),
                        ..snap.state
                    },
                    ..*snap
                };
                let list = sample_agent(
                    &perturbed,
                    scene.grid,
                    config,
                    intervals,
                    mix(seed, k as u64),
                    &[],
                )?;
                candidates.insert((*id).clone(), list);
                params.insert(
                    (*id).clone(),
                    snap.params.with_driver(drivers[assignment[k]]),
                );
            }
            match find_global_optimum(
                &candidates,
                &route.paths,
                &route.zones,
                &params,
                config.budget,
                seed,
            )? {
                None => skipped += 1,
                Some(e) => {
                    if !classes.contains(&e.homotopy) {
                        classes.push(e.homotopy);
                    }
                }
            }
        }
    }
    Ok(MarginalReport {
        unambiguous: classes.len() == 1,
        classes,
        skipped,
        evaluated: driver_count * corner_count,
    })
}

/// What the ego needs to know about itself to plan a defensive maneuver.
#[derive(Debug, Clone, Copy)]
pub struct EgoSpec<'a> {
    pub id: &'a str,
    pub path: &'a Path,
    pub params: &'a CostParams,
    pub limits: &'a KinematicLimits,
    pub grid: TimeGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefensiveManeuver {
    pub trajectory: Trajectory,
    /// Singleton cost of `trajectory`.
    pub cost: f64,
    /// Constant deceleration `v^2 / (2 d)` needed to stop before the nearest
    /// zone ahead; infinite when already inside it.
    pub required_decel: f64,
    pub stoppable: bool,
}

/// Nearest zone interval the ego has not yet left.
fn nearest_zone(s: f64, intervals: &[Interval]) -> Option<Interval> {
    intervals
        .iter()
        .filter(|iv| iv.s_out > s)
        .min_by(|x, y| x.s_in.total_cmp(&y.s_in))
        .copied()
}

/// Deceleration needed to stop from `state` before the nearest zone ahead.
pub fn required_deceleration(state: &LongitudinalState, intervals: &[Interval]) -> f64 {
    match nearest_zone(state.s, intervals) {
        None => 0.0,
        Some(iv) if state.s >= iv.s_in => f64::INFINITY,
        Some(_) if state.v <= 0.0 => 0.0,
        Some(iv) => state.v * state.v / (2.0 * (iv.s_in - state.s)),
    }
}

const MAX_DEFENSIVE_INTERVALS: usize = 120;

/// Least-cost trajectory that brakes to a standstill before the nearest zone
/// ahead after the given jerk prefix. Candidates ramp to a constant
/// deceleration between the required value and full braking.
pub fn defensive_maneuver(
    ego: &EgoSpec<'_>,
    start: LongitudinalState,
    prefix: &[f64],
    zones: &[CollisionZone],
    intervals: usize,
) -> DefensiveManeuver {
    let lim = ego.limits;
    let dt = ego.grid.action_dt;
    let mut post = start;
    for &j in prefix {
        post = advance(post, j.clamp(lim.j_min, lim.j_max), dt, lim);
    }
    let ego_intervals: Vec<Interval> = zones
        .iter()
        .filter_map(|z| z.interval_for(ego.id))
        .collect();
    let required = required_deceleration(&post, &ego_intervals);
    let target = nearest_zone(post.s, &ego_intervals);

    // Ramps the acceleration towards `a_target`; with `stop` it keeps going
    // until standstill.
    let build = |a_target: f64, stop: bool| {
        let mut jerks = prefix.to_vec();
        let mut st = post;
        while jerks.len() < intervals
            || (stop && st.v > 0.0 && jerks.len() < MAX_DEFENSIVE_INTERVALS)
        {
            let j = if st.v <= 0.0 {
                0.0
            } else {
                ((a_target - st.a) / dt).clamp(lim.j_min, lim.j_max)
            };
            st = advance(st, j, dt, lim);
            jerks.push(j);
        }
        let tr = integrate(start, &jerks, lim, ego.grid).with_path(ego.path.id.clone());
        let cost = singleton_cost(&tr, ego.path, ego.params);
        (tr, st, cost)
    };

    let Some(zone) = target else {
        let (trajectory, _, cost) = build(0.0, false);
        return DefensiveManeuver {
            trajectory,
            cost,
            required_decel: required,
            stoppable: true,
        };
    };
    let b_max = -lim.a_min;
    if post.s < zone.s_in && required <= b_max {
        let d = zone.s_in - post.s;
        let margin = (0.5 * d).min(1.0);
        let b_lo = required.max(0.2).min(b_max);
        let steps = 24;
        let mut best: Option<(Trajectory, f64)> = None;
        for k in 0..=steps {
            let b = b_lo * (b_max / b_lo).powf(k as f64 / steps as f64);
            let (tr, end, cost) = build(-b, true);
            if end.v <= 0.0
                && end.s <= zone.s_in - margin
                && best.as_ref().is_none_or(|(_, c)| cost < *c)
            {
                best = Some((tr, cost));
            }
        }
        if let Some((trajectory, cost)) = best {
            return DefensiveManeuver {
                trajectory,
                cost,
                required_decel: required,
                stoppable: true,
            };
        }
    }
    let (trajectory, _, cost) = build(lim.a_min, true);
    DefensiveManeuver {
        trajectory,
        cost,
        required_decel: required,
        stoppable: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Cooperative,
    Defensive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrustEvent {
    /// No previous plan to compare against.
    Initial,
    Compliant,
    CostRise,
    /// The agent planned to go second accelerated beyond its plan.
    Accelerated,
    /// The optimum switched homotopy class; trust restarts.
    Reset,
}

/// Planner memory carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanContext {
    pub p_go: f64,
    pub go_plan: Option<TrajectoryEnsemble>,
    pub go_homotopy: Option<HomotopyClass>,
    pub mode: Mode,
    pub routes: Vec<(String, f64)>,
    pub last_total_cost: Option<f64>,
    pub needs_marginal_check: bool,
}

impl PlanContext {
    pub fn new(routes: &[RouteHypothesis], trust: &TrustParams) -> Self {
        PlanContext {
            p_go: trust.initial,
            go_plan: None,
            go_homotopy: None,
            mode: Mode::Cooperative,
            routes: routes
                .iter()
                .map(|r| (r.id.clone(), r.probability))
                .collect(),
            last_total_cost: None,
            needs_marginal_check: true,
        }
    }
}

/// One trust update. A cost rise beyond `rise_factor` (plus the floor) or a
/// forward push by the second agent halves `p_go`; otherwise the remaining
/// doubt `1 - p_go` is halved.
pub fn update_trust(
    ctx: &PlanContext,
    replanned_cost: f64,
    second_accelerated: bool,
    trust: &TrustParams,
) -> (PlanContext, TrustEvent) {
    let mut next = ctx.clone();
    let Some(last) = ctx.last_total_cost else {
        next.last_total_cost = Some(replanned_cost);
        return (next, TrustEvent::Initial);
    };
    let rise = !(replanned_cost <= trust.rise_factor * last + trust.rise_floor);
    let event = if rise {
        TrustEvent::CostRise
    } else if second_accelerated {
        TrustEvent::Accelerated
    } else {
        TrustEvent::Compliant
    };
    next.p_go = match event {
        TrustEvent::Compliant => 1.0 - (1.0 - ctx.p_go) / 2.0,
        _ => ctx.p_go / 2.0,
    };
    next.last_total_cost = Some(replanned_cost);
    (next, event)
}

/// Whether any agent planned to traverse a zone second is accelerating
/// harder than the go plan predicted for it at the scene time.
pub fn second_agent_accelerated(
    go_plan: &TrajectoryEnsemble,
    scene: &Scene,
    tolerance: f64,
) -> bool {
    go_plan.homotopy.zones.iter().any(|z| {
        let Some(first) = &z.first else {
            return false;
        };
        let second = if *first == z.agent_a {
            &z.agent_b
        } else {
            &z.agent_a
        };
        let (Some(obs), Some(planned)) =
            (scene.agents.get(second), go_plan.trajectories.get(second))
        else {
            return false;
        };
        let expected = planned.state_at(scene.t).a;
        obs.state.a > 0.0 && obs.state.a > expected + tolerance
    })
}

/// Defensive when falling back after the next step would need more than the
/// deceleration threshold and trust has not passed the gate.
pub fn choose_mode(p_go: f64, required_decel: f64, trust: &TrustParams) -> Mode {
    if required_decel > trust.decel_threshold && p_go <= trust.gate {
        Mode::Defensive
    } else {
        Mode::Cooperative
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PlanRequest<'a> {
    pub ego: &'a str,
    pub scene: &'a Scene,
    pub routes: &'a [RouteHypothesis],
    /// Ego jerk already committed for the interval starting at the scene time.
    pub committed_jerk: f64,
    pub horizon_intervals: usize,
    pub seed: u64,
    pub safety: Option<&'a SafetyParams>,
}

/// Candidate sets for one planning step, shared by all evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningProblem {
    pub intervals: usize,
    /// Per route; the ego's list is already safety-filtered for that route.
    pub candidates: Vec<BTreeMap<AgentId, Vec<Trajectory>>>,
    /// Routes in which no ego candidate passed the safety filter.
    pub filter_exhausted: bool,
    pub params: BTreeMap<AgentId, CostParams>,
}

impl PlanningProblem {
    pub fn build(ctx: &PlanContext, req: &PlanRequest<'_>, config: &PlannerConfig) -> Result<Self> {
        let scene = req.scene;
        let ego = scene.agent(req.ego)?;
        if req.routes.is_empty() {
            return Err(Error::invalid("at least one route hypothesis is required"));
        }
        let ego_path = &req.routes[0]
            .paths
            .get(req.ego)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "route {} has no path for the ego",
                    req.routes[0].id
                ))
            })?
            .id;
        for r in req.routes {
            if r.paths.get(req.ego).map(|p| &p.id) != Some(ego_path) {
                return Err(Error::invalid(format!(
                    "route {} assigns the ego a different path",
                    r.id
                )));
            }
            for id in scene.agents.keys() {
                if !r.paths.contains_key(id) {
                    return Err(Error::invalid(format!(
                        "route {} has no path for agent {id}",
                        r.id
                    )));
                }
            }
        }
        let n = req.horizon_intervals.max(2);
        let grid = scene.grid;
        let prefix = [req.committed_jerk];

        let mut ego_list = Vec::new();
        if let Some(prev) = ctx
            .go_plan
            .as_ref()
            .and_then(|p| p.trajectories.get(req.ego))
        {
            let offset = ((scene.t - prev.start.t) / grid.action_dt).round().max(0.0) as usize;
            let mut jerks: Vec<f64> = prev.jerks.iter().skip(offset).copied().collect();
            jerks.resize(n, 0.0);
            jerks[0] = req.committed_jerk;
            ego_list.push(integrate(ego.state, &jerks, &ego.limits, grid));
        }
        ego_list.extend(sample_agent(
            ego,
            grid,
            config,
            n,
            mix(req.seed, 0),
            &prefix,
        )?);
        let main = &req.routes[0];
        let spec = EgoSpec {
            id: req.ego,
            path: &main.paths[req.ego],
            params: &ego.params,
            limits: &ego.limits,
            grid,
        };
        let mut def = defensive_maneuver(&spec, ego.state, &prefix, &main.zones, n).trajectory;
        def.jerks.truncate(n);
        ego_list.push(integrate(ego.state, &def.jerks, &ego.limits, grid));
        let ego_list = dedupe(ego_list);

        let mut others: BTreeMap<AgentId, Vec<Trajectory>> = BTreeMap::new();
        for (k, (id, snap)) in scene.agents.iter().enumerate() {
            if id == req.ego {
                continue;
            }
            let mut list = Vec::new();
            if let Some(prev) = ctx.go_plan.as_ref().and_then(|p| p.trajectories.get(id)) {
                list.push(prev.continuation(snap.state, n));
            }
            list.extend(sample_agent(
                snap,
                grid,
                config,
                n,
                mix(req.seed, 1 + k as u64),
                &[],
            )?);
            others.insert(id.clone(), dedupe(list));
        }

        let observed: Vec<Observed<'_>> = scene
            .agents
            .iter()
            .filter(|(id, _)| *id != req.ego)
            .map(|(id, a)| Observed { id, state: a.state })
            .collect();
        let mut filter_exhausted = false;
        let mut candidates = Vec::with_capacity(req.routes.len());
        for route in req.routes {
            let mut map = BTreeMap::new();
            for (id, list) in &others {
                let pid = &route.paths[id].id;
                map.insert(
                    id.clone(),
                    list.iter()
                        .map(|t| t.clone().with_path(pid.clone()))
                        .collect(),
                );
            }
            let mut ego_route: Vec<Trajectory> = ego_list
                .iter()
                .map(|t| t.clone().with_path(ego_path.clone()))
                .collect();
            if let (true, Some(safety)) = (config.safety_filter, req.safety) {
                let until = scene.t + 2.0 * grid.action_dt;
                let kept: Vec<Trajectory> = ego_route
                    .iter()
                    .filter(|t| {
                        plan_keeps_safe(req.ego, t, scene.t, until, &observed, &route.zones, safety)
                    })
                    .cloned()
                    .collect();
                if kept.is_empty() {
                    filter_exhausted = true;
                } else {
                    ego_route = kept;
                }
            }
            map.insert(req.ego.to_string(), ego_route);
            candidates.push(map);
        }
        Ok(PlanningProblem {
            intervals: n,
            candidates,
            filter_exhausted,
            params: scene.params(),
        })
    }
}

fn dedupe(list: Vec<Trajectory>) -> Vec<Trajectory> {
    let mut seen = BTreeSet::new();
    list.into_iter()
        .filter(|t| {
            seen.insert(
                t.jerks
                    .iter()
                    .map(|j| (j + 0.0).to_bits())
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

/// Per-route summary of one planning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteReport {
    pub route: String,
    pub probability: f64,
    /// Cost of the best go ensemble for the committed action.
    pub g_go: Option<f64>,
    pub g_not_go: Option<f64>,
    pub expected: Option<f64>,
    pub required_decel: f64,
    pub homotopy: Option<HomotopyClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    /// Ego jerk for the interval one action after the scene time.
    pub jerk: f64,
    pub mode: Mode,
    pub p_go: f64,
    pub trust_event: TrustEvent,
    pub expected_total: f64,
    /// Probability-weighted deceleration the fallback would need after the
    /// committed action.
    pub required_decel: f64,
    pub routes: Vec<RouteReport>,
    pub route_plans: Vec<Option<TrajectoryEnsemble>>,
    /// What the ego now pursues, starting at the scene time.
    pub ego_plan: Trajectory,
    pub homotopy: Option<HomotopyClass>,
    pub marginal: Option<MarginalReport>,
    /// No jointly feasible action existed; the defensive maneuver was taken.
    pub infeasible: bool,
}

struct Group {
    key: u64,
    jerk: f64,
    members: Vec<usize>,
}

fn groups_by_free_jerk(list: &[Trajectory]) -> Vec<Group> {
    let mut out: Vec<Group> = Vec::new();
    for (i, t) in list.iter().enumerate() {
        let j = t.jerks[1] + 0.0;
        match out.iter_mut().find(|g| g.key == j.to_bits()) {
            Some(g) => g.members.push(i),
            None => out.push(Group {
                key: j.to_bits(),
                jerk: j,
                members: vec![i],
            }),
        }
    }
    out
}

fn zone_is_live(zone: &CollisionZone, scene: &Scene) -> bool {
    [
        (&zone.agent_a, zone.interval_a),
        (&zone.agent_b, zone.interval_b),
    ]
    .iter()
    .all(|(id, iv)| scene.agents.get(*id).is_none_or(|a| a.state.s < iv.s_out))
}

/// Index of the most probable route, ties to the first.
fn main_route(routes: &[RouteHypothesis]) -> usize {
    let mut best = 0;
    for (i, r) in routes.iter().enumerate() {
        if r.probability > routes[best].probability {
            best = i;
        }
    }
    best
}

/// One planning step of the cooperative controller for `req.ego`.
pub fn plan_step(
    ctx: &PlanContext,
    req: &PlanRequest<'_>,
    config: &PlannerConfig,
) -> Result<(PlanOutcome, PlanContext)> {
    // Zones already left by one of their agents no longer constrain anyone.
    let live: Vec<RouteHypothesis> = req
        .routes
        .iter()
        .map(|r| RouteHypothesis {
            zones: r
                .zones
                .iter()
                .filter(|z| zone_is_live(z, req.scene))
                .cloned()
                .collect(),
            ..r.clone()
        })
        .collect();
    let req = &PlanRequest {
        routes: &live,
        ..*req
    };
    let problem = PlanningProblem::build(ctx, req, config)?;
    let scene = req.scene;
    let ego = scene.agent(req.ego)?;
    let grid = scene.grid;
    let n = problem.intervals;
    let trust = &config.trust;
    let main = main_route(req.routes);

    // Best go ensemble per route and first free ego jerk.
    let mut tables = Vec::with_capacity(req.routes.len());
    for (r, route) in req.routes.iter().enumerate() {
        tables.push(ComboTable::new(
            &problem.candidates[r],
            &route.paths,
            &route.zones,
            &problem.params,
        )?);
    }
    let mut per_route: Vec<BTreeMap<u64, (f64, Vec<usize>)>> = Vec::new();
    let mut jerk_of: BTreeMap<u64, f64> = BTreeMap::new();
    let mut order: Vec<u64> = Vec::new();
    for (r, table) in tables.iter().enumerate() {
        let pivot = table
            .agents
            .iter()
            .position(|a| a.as_str() == req.ego)
            .unwrap();
        let best = best_per_candidate(table, pivot, config.budget, mix(req.seed, 1000 + r as u64));
        let mut by_jerk = BTreeMap::new();
        for g in groups_by_free_jerk(&problem.candidates[r][req.ego]) {
            if let std::collections::btree_map::Entry::Vacant(e) = jerk_of.entry(g.key) {
                e.insert(g.jerk);
                order.push(g.key);
            }
            let winner = g.members.iter().filter_map(|&i| best[i].as_ref()).fold(
                None::<&(f64, Vec<usize>)>,
                |acc, x| match acc {
                    Some(a) if a.0 <= x.0 => Some(a),
                    _ => Some(x),
                },
            );
            if let Some(w) = winner {
                by_jerk.insert(g.key, w.clone());
            }
        }
        per_route.push(by_jerk);
    }

    // Fallback cost per route and free jerk.
    let ego_spec = |r: usize| EgoSpec {
        id: req.ego,
        path: &req.routes[r].paths[req.ego],
        params: &ego.params,
        limits: &ego.limits,
        grid,
    };
    let others_best: Vec<f64> = (0..req.routes.len())
        .map(|r| {
            problem.candidates[r]
                .iter()
                .filter(|(id, _)| id.as_str() != req.ego)
                .map(|(id, list)| {
                    let path = &req.routes[r].paths[id];
                    list.iter()
                        .map(|t| singleton_cost(t, path, &problem.params[id]))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum()
        })
        .collect();
    let fallback = |r: usize, jerk: f64| {
        let d = defensive_maneuver(
            &ego_spec(r),
            ego.state,
            &[req.committed_jerk, jerk],
            &req.routes[r].zones,
            n,
        );
        (
            d.cost + others_best[r],
            d.required_decel.min(-ego.limits.a_min),
        )
    };

    // Trust update against the unconditioned go optimum.
    let go_optimum: Vec<Option<&(f64, Vec<usize>)>> = per_route
        .iter()
        .map(|m| {
            m.values()
                .fold(None, |acc: Option<&(f64, Vec<usize>)>, x| match acc {
                    Some(a) if a.0 <= x.0 => Some(a),
                    _ => Some(x),
                })
        })
        .collect();
    let replanned = go_optimum
        .iter()
        .zip(req.routes)
        .try_fold(0.0, |acc, (b, r)| b.map(|(c, _)| acc + r.probability * c));
    let accelerated = ctx
        .go_plan
        .as_ref()
        .is_some_and(|p| second_agent_accelerated(p, scene, trust.accel_tolerance));
    let (mut next, mut trust_event) =
        update_trust(ctx, replanned.unwrap_or(f64::INFINITY), accelerated, trust);
    if replanned.is_none() {
        next.last_total_cost = ctx.last_total_cost;
    }
    let main_class = match go_optimum[main] {
        Some((_, combo)) => Some(classify_homotopy(
            &tables[main].ensemble_trajectories(combo, &problem.candidates[main]),
            &req.routes[main].zones,
        )?),
        None => None,
    };
    if let (Some(prev), Some(cur)) = (&ctx.go_homotopy, &main_class) {
        if prev.conflicts_with(cur) {
            next.p_go = trust.initial;
            next.needs_marginal_check = true;
            trust_event = TrustEvent::Reset;
        }
    }
    let p_go = next.p_go;

    // Committed action: minimize the route-weighted expected cost over free
    // jerks that are feasible in every route.
    // (jerk key, expected total, per route: fallback cost, expected cost, required decel)
    type Choice = (u64, f64, Vec<(f64, f64, f64)>);
    let mut best_u: Option<Choice> = None;
    if !problem.filter_exhausted {
        for key in &order {
            let mut total = 0.0;
            let mut parts = Vec::with_capacity(req.routes.len());
            let mut ok = true;
            for (r, route) in req.routes.iter().enumerate() {
                let Some((g_go, _)) = per_route[r].get(key) else {
                    ok = false;
                    break;
                };
                let (g_not, decel) = fallback(r, jerk_of[key]);
                let expected = p_go * g_go + (1.0 - p_go) * g_not;
                total += route.probability * expected;
                parts.push((g_not, expected, decel));
            }
            if ok && best_u.as_ref().is_none_or(|(_, b, _)| total < *b) {
                best_u = Some((*key, total, parts));
            }
        }
    }

    let marginal = if ctx.needs_marginal_check && config.marginal_check && scene.agents.len() >= 2 {
        next.needs_marginal_check = false;
        Some(marginal_case_check(
            scene,
            &req.routes[main],
            config,
            &[DriverType::Dynamic, DriverType::Defensive],
            n,
            req.seed,
        )?)
    } else {
        None
    };

    let defensive_now = || {
        let mut d = defensive_maneuver(
            &ego_spec(main),
            ego.state,
            &[req.committed_jerk],
            &req.routes[main].zones,
            n,
        );
        if d.trajectory.jerks.len() < 2 {
            d.trajectory = integrate(ego.state, &[req.committed_jerk, 0.0], &ego.limits, grid);
        }
        d
    };
    // A fallback is only available while it keeps the ego provably safe in
    // every route hypothesis.
    let observed: Vec<Observed<'_>> = scene
        .agents
        .iter()
        .filter(|(id, _)| id.as_str() != req.ego)
        .map(|(id, a)| Observed { id, state: a.state })
        .collect();
    let admissible = |t: &Trajectory| match (config.safety_filter, req.safety) {
        (true, Some(safety)) => req.routes.iter().all(|r| {
            plan_keeps_safe(
                req.ego,
                t,
                scene.t,
                scene.t + 2.0 * grid.action_dt,
                &observed,
                &r.zones,
                safety,
            )
        }),
        _ => true,
    };

    let Some((key, expected_total, parts)) = best_u else {
        let mut d = defensive_now();
        if !problem.filter_exhausted && !admissible(&d.trajectory) {
            // Keep the cheapest candidate that stays safe in every route.
            let list = &problem.candidates[main][req.ego];
            let path = &req.routes[main].paths[req.ego];
            let fallback = list
                .iter()
                .filter(|t| admissible(t))
                .map(|t| (singleton_cost(t, path, &ego.params), t))
                .min_by(|x, y| x.0.total_cmp(&y.0));
            if let Some((_, t)) = fallback {
                d.trajectory = t.clone();
            }
        }
        next.mode = Mode::Defensive;
        // Without a go plan the expectation collapses onto the fallback.
        let routes = req
            .routes
            .iter()
            .enumerate()
            .map(|(r, route)| {
                let g_not = Some(fallback(r, d.trajectory.jerks[1]).0).filter(|c| c.is_finite());
                RouteReport {
                    route: route.id.clone(),
                    probability: route.probability,
                    g_go: None,
                    g_not_go: g_not,
                    expected: g_not,
                    required_decel: d.required_decel,
                    homotopy: None,
                }
            })
            .collect();
        let outcome = PlanOutcome {
            jerk: d.trajectory.jerks[1],
            mode: Mode::Defensive,
            p_go,
            trust_event,
            expected_total: f64::INFINITY,
            required_decel: d.required_decel,
            routes,
            route_plans: vec![None; req.routes.len()],
            ego_plan: d.trajectory,
            homotopy: None,
            marginal,
            infeasible: true,
        };
        return Ok((outcome, next));
    };

    let mut route_plans = Vec::with_capacity(req.routes.len());
    let mut reports = Vec::with_capacity(req.routes.len());
    let mut weighted_decel = 0.0;
    for (r, route) in req.routes.iter().enumerate() {
        let (g_go, combo) = &per_route[r][&key];
        let ensemble = tables[r].ensemble(
            combo,
            &problem.candidates[r],
            &route.paths,
            &route.zones,
            &problem.params,
        )?;
        let (g_not, expected, decel) = parts[r];
        weighted_decel += route.probability * decel;
        reports.push(RouteReport {
            route: route.id.clone(),
            probability: route.probability,
            g_go: Some(*g_go),
            g_not_go: Some(g_not),
            expected: Some(expected),
            required_decel: decel,
            homotopy: Some(ensemble.homotopy.clone()),
        });
        route_plans.push(Some(ensemble));
    }

    let go_plan = route_plans[main].clone().unwrap();
    let mut mode = choose_mode(p_go, weighted_decel, trust);
    let defensive = (mode == Mode::Defensive).then(defensive_now);
    if defensive
        .as_ref()
        .is_some_and(|d| !admissible(&d.trajectory))
    {
        mode = Mode::Cooperative;
    }
    let (jerk, ego_plan) = match (mode, defensive) {
        (Mode::Defensive, Some(d)) => (d.trajectory.jerks[1], d.trajectory),
        _ => (jerk_of[&key], go_plan.trajectories[req.ego].clone()),
    };
    next.mode = mode;
    next.go_homotopy = Some(go_plan.homotopy.clone());
    next.go_plan = Some(go_plan);
    let outcome = PlanOutcome {
        jerk,
        mode,
        p_go,
        trust_event,
        expected_total,
        required_decel: weighted_decel,
        routes: reports,
        homotopy: main_class,
        route_plans,
        ego_plan,
        marginal,
        infeasible: false,
    };
    Ok((outcome, next))
}

impl ComboTable<'_> {
    fn ensemble_trajectories(
        &self,
        combo: &[usize],
        candidates: &BTreeMap<AgentId, Vec<Trajectory>>,
    ) -> BTreeMap<AgentId, Trajectory> {
        self.agents
            .iter()
            .zip(combo)
            .map(|(a, &c)| ((*a).clone(), candidates[*a][c].clone()))
            .collect()
    }
}
