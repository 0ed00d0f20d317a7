//! Closed-loop simulation.
//!
//! Time advances in fixed substeps. At every action boundary `t_i` each
//! controller plans from the state snapshot at `t_i`; its output takes effect
//! one action later. Between boundaries the safety monitor of every
//! non-scripted agent runs each substep and may replace the planned jerk by
//! full braking.

pub mod diagram;
pub mod fixtures;
pub mod log;
pub mod scenario;

use std::collections::BTreeMap;

use crate::costs::DriverType;
use crate::costs::{final_state_safe, pairwise_from_views, singleton_cost, ZoneView};
use crate::geometry::CollisionZone;
use crate::par;
use crate::planner::{
    defensive_maneuver, marginal_case_check, mix, plan_step, AgentSnapshot, EgoSpec,
    MarginalReport, PlanContext, PlanRequest, PlannerConfig, RouteHypothesis, Scene,
};
use crate::safety::{plan_keeps_safe, MonitorDecision, Observed, SafetyMonitor, SafetyParams};
use crate::trajectory::{
    advance, integrate, sample_trajectory_set, LongitudinalState, SamplingSpec, Trajectory,
};
use crate::{AgentId, Result};

pub use diagram::PathTimeDiagram;
pub use log::{ControlSource, RunLog, RunSummary, Termination};
pub use scenario::{parse_scenario, ControllerKind, ScenarioSpec, World};

use log::{AgentTrace, CollisionEvent, PlannerRecord, SampleRow};

/// Speed below which an agent counts as stopped for deadlock detection.
pub const DEADLOCK_SPEED: f64 = 0.1;
/// How long all interacting agents must be stopped to call a deadlock.
pub const DEADLOCK_DURATION: f64 = 5.0;

/// Smallest multiple of `action_dt` by which every agent sharing a
/// not-yet-passed zone would have strictly passed it at its current speed,
/// capped at `max_horizon`. One action when no such zone exists.
pub fn dynamic_horizon(
    states: &BTreeMap<AgentId, LongitudinalState>,
    zones: &[CollisionZone],
    action_dt: f64,
    max_horizon: f64,
) -> f64 {
    let mut needed: f64 = 0.0;
    let mut any = false;
    for z in zones {
        let (Some(sa), Some(sb)) = (states.get(&z.agent_a), states.get(&z.agent_b)) else {
            continue;
        };
        if sa.s >= z.interval_a.s_out || sb.s >= z.interval_b.s_out {
            continue;
        }
        any = true;
        for (st, iv) in [(sa, z.interval_a), (sb, z.interval_b)] {
            let t = if st.v > 0.0 {
                (iv.s_out - st.s) / st.v
            } else {
                f64::INFINITY
            };
            needed = needed.max(((t / action_dt).floor() + 1.0) * action_dt);
        }
    }
    if !any {
        return action_dt;
    }
    needed.min(max_horizon)
}

/// Jerk of a scripted agent at time `t`; zero before the first entry.
pub fn script_jerk(script: &[[f64; 2]], t: f64) -> f64 {
    script
        .iter()
        .take_while(|e| e[0] <= t + 1e-9)
        .last()
        .map_or(0.0, |e| e[1])
}

/// Predicts `state` forward at constant speed.
fn constant_velocity(
    state: LongitudinalState,
    intervals: usize,
    world: &World,
    limits: &crate::trajectory::KinematicLimits,
) -> Trajectory {
    let start = LongitudinalState { a: 0.0, ..state };
    integrate(start, &vec![0.0; intervals], limits, world.grid)
}

struct PlanResult {
    jerk: f64,
    pursued: Trajectory,
    ctx: Option<PlanContext>,
    record: Option<PlannerRecord>,
}

/// Own-cost planner treating constant-velocity predictions of the others as
/// hard constraints.
#[allow(clippy::too_many_arguments)]
fn classical_plan(
    world: &World,
    idx: usize,
    states: &[LongitudinalState],
    committed: f64,
    previous: Option<&Trajectory>,
    intervals: usize,
    seed: u64,
    config: &PlannerConfig,
    safety: &SafetyParams,
) -> Result<PlanResult> {
    let me = &world.agents[idx];
    let path = &world.paths[&me.path];
    let state = states[idx];
    let n = intervals.max(2);
    let zones: Vec<&CollisionZone> = world.routes[0]
        .zones
        .iter()
        .filter(|z| z.involves(&me.id))
        .collect();
    let owned: Vec<CollisionZone> = zones.iter().map(|z| (*z).clone()).collect();

    let mut candidates = Vec::new();
    if let Some(prev) = previous {
        let offset = ((state.t - prev.start.t) / world.grid.action_dt)
            .round()
            .max(0.0) as usize;
        let mut jerks: Vec<f64> = prev.jerks.iter().skip(offset).copied().collect();
        jerks.resize(n, 0.0);
        jerks[0] = committed;
        candidates.push(integrate(state, &jerks, &me.limits, world.grid));
    }
    candidates.extend(sample_trajectory_set(
        state,
        &me.limits,
        world.grid,
        &SamplingSpec {
            horizon: n as f64 * world.grid.action_dt,
            jerk_values: &config.jerk_values,
            max_count: config.candidates,
            seed,
            prefix: &[committed],
        },
    )?);
    let spec = EgoSpec {
        id: &me.id,
        path,
        params: &me.params,
        limits: &me.limits,
        grid: world.grid,
    };
    let mut fallback = defensive_maneuver(&spec, state, &[committed], &owned, n);
    let mut def = fallback.trajectory.clone();
    def.jerks.truncate(n);
    candidates.push(integrate(state, &def.jerks, &me.limits, world.grid));

    let predictions: BTreeMap<&str, Trajectory> = world
        .agents
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != idx)
        .map(|(j, a)| {
            (
                a.id.as_str(),
                constant_velocity(states[j], n, world, &a.limits),
            )
        })
        .collect();
    let observed: Vec<Observed<'_>> = world
        .agents
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != idx)
        .map(|(j, a)| Observed {
            id: &a.id,
            state: states[j],
        })
        .collect();
    let admissible = |c: &Trajectory| {
        zones.iter().all(|z| {
            let partner = z.partner_of(&me.id).unwrap();
            let pred = &predictions[partner.as_str()];
            let mine = ZoneView::new(c, z.interval_for(&me.id).unwrap());
            let theirs = ZoneView::new(pred, z.interval_for(partner).unwrap());
            final_state_safe(&mine, &theirs)
                && pairwise_from_views(z, &me.id, &mine, &theirs, &me.params).is_some()
        }) && (!config.safety_filter
            || plan_keeps_safe(
                &me.id,
                c,
                state.t,
                state.t + 2.0 * world.grid.action_dt,
                &observed,
                &owned,
                safety,
            ))
    };
    let best = par::argmin_range(candidates.len(), |i| {
        admissible(&candidates[i]).then(|| singleton_cost(&candidates[i], path, &me.params))
    });
    let pursued = match best {
        Some((i, _)) => candidates.swap_remove(i),
        None => {
            if fallback.trajectory.jerks.len() < 2 {
                fallback.trajectory = integrate(state, &[committed, 0.0], &me.limits, world.grid);
            }
            fallback.trajectory
        }
    };
    Ok(PlanResult {
        jerk: pursued.jerks[1],
        pursued,
        ctx: None,
        record: None,
    })
}

struct Runtime {
    state: LongitudinalState,
    pending: f64,
    active: f64,
    pursued: Option<Trajectory>,
    ctx: Option<PlanContext>,
    monitor: SafetyMonitor,
    rows: Vec<SampleRow>,
    zones: Vec<CollisionZone>,
}

/// Runs a validated scenario to its end time, to all goals, or to the first
/// collision involving a non-scripted agent.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<RunLog> {
    let world = World::build(spec)?;
    run_world(spec, &world)
}

pub fn run_world(spec: &ScenarioSpec, world: &World) -> Result<RunLog> {
    let sim = &spec.sim;
    let per_action = (sim.action_dt / sim.step).round() as usize;
    let total = (sim.end_time / sim.step).round() as usize;
    let n_agents = world.agents.len();

    let mut rt: Vec<Runtime> = world
        .agents
        .iter()
        .map(|a| {
            let mut zones: Vec<CollisionZone> = Vec::new();
            for r in &world.routes {
                for z in r.zones.iter().filter(|z| z.involves(&a.id)) {
                    if !zones.contains(z) {
                        zones.push(z.clone());
                    }
                }
            }
            Runtime {
                state: a.initial,
                pending: 0.0,
                active: 0.0,
                pursued: None,
                ctx: (a.controller == ControllerKind::Cooperative)
                    .then(|| PlanContext::new(&world.routes, &spec.planner.trust)),
                monitor: SafetyMonitor::new(),
                rows: Vec::with_capacity(total + 1),
                zones,
            }
        })
        .collect();

    let mut planner_records = Vec::new();
    let mut collisions = Vec::new();
    let mut still_for = 0.0;
    let mut termination = None;
    let mut end_time = sim.end_time;

    for k in 0..=total {
        let t = k as f64 * sim.step;
        let boundary = k % per_action == 0;
        if boundary && k < total {
            let step_index = (k / per_action) as u64;
            for r in rt.iter_mut() {
                r.active = r.pending;
            }
            let states: Vec<LongitudinalState> = rt.iter().map(|r| r.state).collect();
            let results: Vec<Result<Option<PlanResult>>> = par::map_range(n_agents, |i| {
                plan_agent(
                    spec,
                    world,
                    &rt,
                    &states,
                    i,
                    mix(sim.seed, ((i as u64) << 32) | step_index),
                )
            });
            for (i, res) in results.into_iter().enumerate() {
                if let Some(p) = res? {
                    rt[i].pending = p.jerk;
                    rt[i].pursued = Some(p.pursued);
                    if p.ctx.is_some() {
                        rt[i].ctx = p.ctx;
                    }
                    if let Some(rec) = p.record {
                        planner_records.push(rec);
                    }
                }
            }
        }

        // Control for this substep.
        let snapshot: Vec<LongitudinalState> = rt.iter().map(|r| r.state).collect();
        let mut applied = Vec::with_capacity(n_agents);
        for (i, a) in world.agents.iter().enumerate() {
            if a.controller == ControllerKind::Ignorant {
                applied.push((script_jerk(&a.script, t), ControlSource::Script));
                continue;
            }
            let others: Vec<Observed<'_>> = world
                .agents
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, o)| Observed {
                    id: &o.id,
                    state: snapshot[j],
                })
                .collect();
            let r = &mut rt[i];
            let decision = match &r.pursued {
                Some(plan) => r.monitor.tick(
                    t,
                    &a.id,
                    &r.state,
                    &others,
                    &r.zones,
                    plan,
                    &spec.safety,
                    boundary,
                ),
                None => MonitorDecision::PassThrough,
            };
            match decision {
                MonitorDecision::PassThrough => applied.push((r.active, ControlSource::Plan)),
                MonitorDecision::Override => {
                    r.state.a = if r.state.v > 0.0 { a.limits.a_min } else { 0.0 };
                    applied.push((0.0, ControlSource::Override));
                }
            }
        }

        for (i, a) in world.agents.iter().enumerate() {
            let st = rt[i].state;
            let pos = world.paths[&a.path].point_at_clamped(st.s).position;
            let (jerk, source) = if k < total && termination.is_none() {
                applied[i]
            } else {
                (0.0, applied[i].1)
            };
            rt[i].rows.push(SampleRow {
                t,
                s: st.s,
                v: st.v,
                a: st.a,
                x: pos.x,
                y: pos.y,
                jerk,
                source,
            });
        }
        if k == total || termination.is_some() {
            end_time = t;
            break;
        }

        for (i, a) in world.agents.iter().enumerate() {
            let mut st = advance(rt[i].state, applied[i].0, sim.step, &a.limits);
            st.t = (k + 1) as f64 * sim.step;
            rt[i].state = st;
        }

        // Collisions.
        for i in 0..n_agents {
            for j in i + 1..n_agents {
                let (ai, aj) = (&world.agents[i], &world.agents[j]);
                let pi = world.paths[&ai.path]
                    .point_at_clamped(rt[i].state.s)
                    .position;
                let pj = world.paths[&aj.path]
                    .point_at_clamped(rt[j].state.s)
                    .position;
                let d = pi.distance(pj);
                if d < ai.footprint_radius + aj.footprint_radius {
                    collisions.push(CollisionEvent {
                        t: (k + 1) as f64 * sim.step,
                        agents: (ai.id.clone(), aj.id.clone()),
                        distance: d,
                    });
                    let scripted = ai.controller == ControllerKind::Ignorant
                        && aj.controller == ControllerKind::Ignorant;
                    if !scripted {
                        termination = Some(Termination::Collision);
                    }
                }
            }
        }
        if termination.is_none()
            && world
                .agents
                .iter()
                .zip(&rt)
                .all(|(a, r)| r.state.s >= a.goal)
        {
            termination = Some(Termination::GoalReached);
        }

        // Deadlock bookkeeping.
        let index = |id: &str| world.agents.iter().position(|a| a.id == id).unwrap();
        let mut involved = vec![false; n_agents];
        for z in &world.zones {
            let (ia, ib) = (index(&z.agent_a), index(&z.agent_b));
            if rt[ia].state.s < z.interval_a.s_out && rt[ib].state.s < z.interval_b.s_out {
                involved[ia] = true;
                involved[ib] = true;
            }
        }
        let stuck = involved.iter().any(|&x| x)
            && involved
                .iter()
                .zip(&rt)
                .all(|(&inv, r)| !inv || r.state.v < DEADLOCK_SPEED);
        still_for = if stuck { still_for + sim.step } else { 0.0 };
    }

    let termination = termination.unwrap_or(if still_for >= DEADLOCK_DURATION - 1e-9 {
        Termination::Deadlock
    } else {
        Termination::Horizon
    });
    let mut safety: Vec<_> = rt
        .iter()
        .flat_map(|r| r.monitor.events.iter().cloned())
        .collect();
    safety.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.agent.cmp(&b.agent)));
    let agents = world
        .agents
        .iter()
        .zip(rt)
        .map(|(a, r)| AgentTrace {
            id: a.id.clone(),
            controller: a.controller,
            path: a.path.clone(),
            footprint_radius: a.footprint_radius,
            rows: r.rows,
        })
        .collect();
    Ok(RunLog {
        scenario: spec.name.clone(),
        seed: sim.seed,
        step: sim.step,
        agents,
        zones: world.zones.clone(),
        planner: planner_records,
        safety,
        collisions,
        termination,
        end_time,
    })
}

fn plan_agent(
    spec: &ScenarioSpec,
    world: &World,
    rt: &[Runtime],
    states: &[LongitudinalState],
    i: usize,
    seed: u64,
) -> Result<Option<PlanResult>> {
    let me = &world.agents[i];
    let state_map: BTreeMap<AgentId, LongitudinalState> = world
        .agents
        .iter()
        .zip(states)
        .map(|(a, s)| (a.id.clone(), *s))
        .collect();
    let horizon = dynamic_horizon(
        &state_map,
        &rt[i].zones,
        spec.sim.action_dt,
        spec.sim.max_horizon,
    );
    let intervals = (horizon / spec.sim.action_dt).round() as usize;
    match me.controller {
        ControllerKind::Ignorant => Ok(None),
        ControllerKind::Classical => classical_plan(
            world,
            i,
            states,
            rt[i].active,
            rt[i].pursued.as_ref(),
            intervals,
            seed,
            &spec.planner,
            &spec.safety,
        )
        .map(Some),
        ControllerKind::Cooperative => {
            let scene = Scene {
                t: states[i].t,
                agents: world
                    .agents
                    .iter()
                    .zip(states)
                    .map(|(a, s)| {
                        (
                            a.id.clone(),
                            AgentSnapshot {
                                state: *s,
                                limits: a.limits,
                                params: a.params,
                            },
                        )
                    })
                    .collect(),
                grid: world.grid,
            };
            let ctx = rt[i]
                .ctx
                .as_ref()
                .expect("cooperative agents carry a plan context");
            let req = PlanRequest {
                ego: &me.id,
                scene: &scene,
                routes: &world.routes,
                committed_jerk: rt[i].active,
                horizon_intervals: intervals,
                seed,
                safety: Some(&spec.safety),
            };
            let (out, next) = plan_step(ctx, &req, &spec.planner)?;
            let record = PlannerRecord {
                t: scene.t,
                agent: me.id.clone(),
                mode: out.mode,
                p_go: out.p_go,
                trust_event: out.trust_event,
                homotopy: out
                    .homotopy
                    .as_ref()
                    .map_or_else(|| "none".into(), |h| h.label()),
                expected_total: out.expected_total,
                required_decel: out.required_decel,
                committed_jerk: out.jerk,
                horizon,
                infeasible: out.infeasible,
                unambiguous: out.marginal.as_ref().map(|m| m.unambiguous),
                routes: out.routes.clone(),
            };
            Ok(Some(PlanResult {
                jerk: out.jerk,
                pursued: out.ego_plan,
                ctx: Some(next),
                record: Some(record),
            }))
        }
    }
}

/// Static analysis of a scenario's initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    /// Agent from whose perspective the verdict is taken: the first listed.
    pub ego: AgentId,
    pub routes: Vec<RouteHypothesis>,
    /// Dynamic horizon for the ego at the initial state [s].
    pub horizon: f64,
    /// Marginal-case verdict on the most probable route; `None` with a
    /// single agent.
    pub marginal: Option<MarginalReport>,
}

impl CheckReport {
    /// `unambiguous: <class>` or `ambiguous`.
    pub fn verdict(&self) -> String {
        match &self.marginal {
            Some(m) if m.unambiguous && !m.classes.is_empty() => {
                format!("unambiguous: {}", m.classes[0].label())
            }
            Some(_) => "ambiguous".into(),
            None => "unambiguous: no interaction".into(),
        }
    }
}

/// Validates and analyses a scenario without running it.
pub fn check_scenario(spec: &ScenarioSpec) -> Result<CheckReport> {
    let world = World::build(spec)?;
    let ego = world.agents[0].id.clone();
    let states: BTreeMap<AgentId, LongitudinalState> = world
        .agents
        .iter()
        .map(|a| (a.id.clone(), a.initial))
        .collect();
    let ego_zones: Vec<CollisionZone> = world
        .routes
        .iter()
        .flat_map(|r| r.zones.iter().filter(|z| z.involves(&ego)).cloned())
        .collect();
    let horizon = dynamic_horizon(
        &states,
        &ego_zones,
        spec.sim.action_dt,
        spec.sim.max_horizon,
    );
    let marginal = if world.agents.len() >= 2 {
        let scene = Scene {
            t: 0.0,
            agents: world
                .agents
                .iter()
                .map(|a| {
                    (
                        a.id.clone(),
                        AgentSnapshot {
                            state: a.initial,
                            limits: a.limits,
                            params: a.params,
                        },
                    )
                })
                .collect(),
            grid: world.grid,
        };
        let main = world
            .routes
            .iter()
            .reduce(|best, r| {
                if r.probability > best.probability {
                    r
                } else {
                    best
                }
            })
            .expect("at least one route");
        let intervals = ((horizon / spec.sim.action_dt).round() as usize).max(2);
        Some(marginal_case_check(
            &scene,
            main,
            &spec.planner,
            &[DriverType::Dynamic, DriverType::Defensive],
            intervals,
            spec.sim.seed,
        )?)
    } else {
        None
    };
    Ok(CheckReport {
        ego,
        routes: world.routes,
        horizon,
        marginal,
    })
}
