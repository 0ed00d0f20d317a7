//! Scenario files: TOML with `[sim]`, `[safety]`, `[planner]`, `[[paths]]`,
//! `[[agents]]` and optional `[[routes]]` sections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::costs::CostParams;
use crate::geometry::{build_path, find_collision_zones, CollisionZone, Path, Point};
use crate::planner::{PlannerConfig, RouteHypothesis};
use crate::safety::SafetyParams;
use crate::trajectory::{KinematicLimits, LongitudinalState, TimeGrid};
use crate::{AgentId, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub end_time: f64,
    pub seed: u64,
    /// Integration and safety-monitor step [s].
    pub step: f64,
    pub action_dt: f64,
    pub max_horizon: f64,
    /// Resampling step of path centerlines [m].
    pub path_step: f64,
    /// Sample spacing used when evaluating plan costs [s].
    pub cost_dt: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            end_time: 40.0,
            seed: 0,
            step: 0.01,
            action_dt: 1.0,
            max_horizon: 35.0,
            path_step: 0.5,
            cost_dt: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub id: String,
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    pub points: Vec<[f64; 2]>,
}

fn default_lane_width() -> f64 {
    3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Cooperative,
    Classical,
    Ignorant,
}

/// Cost parameters; anything not given takes the dynamic-driver default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSpec {
    pub v_des: Option<f64>,
    pub w_v: Option<f64>,
    pub w_at: Option<f64>,
    pub w_an: Option<f64>,
    pub w_clear: Option<f64>,
    pub t_clear_ref: Option<f64>,
    pub t_clear_ref_yield: Option<f64>,
    pub driver_type: Option<crate::costs::DriverType>,
}

impl CostSpec {
    fn resolve(&self, fallback_v_des: f64) -> CostParams {
        let base = CostParams::dynamic(self.v_des.unwrap_or(fallback_v_des));
        let p = CostParams {
            w_v: self.w_v.unwrap_or(base.w_v),
            w_at: self.w_at.unwrap_or(base.w_at),
            w_an: self.w_an.unwrap_or(base.w_an),
            w_clear: self.w_clear.unwrap_or(base.w_clear),
            t_clear_ref: self.t_clear_ref.unwrap_or(base.t_clear_ref),
            t_clear_ref_yield: self.t_clear_ref_yield.unwrap_or(base.t_clear_ref_yield),
            ..base
        };
        match self.driver_type {
            Some(d) => p.with_driver(d),
            None => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: AgentId,
    pub controller: ControllerKind,
    /// Path actually driven.
    pub path: String,
    #[serde(default)]
    pub s0: f64,
    pub v0: f64,
    #[serde(default)]
    pub a0: f64,
    #[serde(default = "default_radius")]
    pub footprint_radius: f64,
    /// Arc length that counts as having arrived; defaults to the path end.
    #[serde(default)]
    pub goal: Option<f64>,
    /// Zones shared with this agent give it the right of way.
    #[serde(default)]
    pub right_of_way: bool,
    #[serde(default)]
    pub limits: Option<KinematicLimits>,
    #[serde(default)]
    pub cost: CostSpec,
    /// `[start_time, jerk]` pairs for scripted agents.
    #[serde(default)]
    pub script: Vec<[f64; 2]>,
}

fn default_radius() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub id: String,
    pub probability: f64,
    /// Path per agent; agents not listed keep their driven path.
    #[serde(default)]
    pub paths: BTreeMap<AgentId, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub safety: SafetyParams,
    #[serde(default)]
    pub planner: PlannerConfig,
    pub paths: Vec<PathSpec>,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub routes: Vec<RouteSpec>,
}

/// Parses and validates a scenario. Syntax errors carry line and column.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec> {
    let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

impl ScenarioSpec {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        let positive = [
            ("sim.end_time", s.end_time),
            ("sim.step", s.step),
            ("sim.action_dt", s.action_dt),
            ("sim.max_horizon", s.max_horizon),
            ("sim.path_step", s.path_step),
            ("sim.cost_dt", s.cost_dt),
        ];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::validation(
                    field,
                    format!("must be positive, got {value}"),
                ));
            }
        }
        let ratio = s.action_dt / s.step;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::validation("sim.step", "must divide sim.action_dt"));
        }
        let ratio = s.action_dt / s.cost_dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::validation(
                "sim.cost_dt",
                "must divide sim.action_dt",
            ));
        }
        self.safety
            .validate(None)
            .map_err(|e| Error::validation("safety", e.to_string()))?;
        self.planner.validate()?;

        let mut path_ids = BTreeMap::new();
        for (i, p) in self.paths.iter().enumerate() {
            if path_ids.insert(p.id.as_str(), i).is_some() {
                return Err(Error::validation(
                    format!("paths[{i}].id"),
                    format!("duplicate path '{}'", p.id),
                ));
            }
        }
        if self.agents.is_empty() {
            return Err(Error::validation(
                "agents",
                "at least one agent is required",
            ));
        }
        let mut agent_ids = BTreeMap::new();
        for (i, a) in self.agents.iter().enumerate() {
            let field = |f: &str| format!("agents[{i}].{f}");
            if agent_ids.insert(a.id.as_str(), i).is_some() {
                return Err(Error::validation(
                    field("id"),
                    format!("duplicate agent '{}'", a.id),
                ));
            }
            if !path_ids.contains_key(a.path.as_str()) {
                return Err(Error::validation(
                    field("path"),
                    format!("agent '{}' references unknown path '{}'", a.id, a.path),
                ));
            }
            let lim = a.limits.unwrap_or_default();
            lim.validate()
                .map_err(|e| Error::validation(field("limits"), e.to_string()))?;
            if !(a.v0 >= 0.0 && a.v0 <= lim.v_max) {
                return Err(Error::validation(
                    field("v0"),
                    format!("{} outside [0, {}]", a.v0, lim.v_max),
                ));
            }
            if !(a.a0 >= lim.a_min && a.a0 <= lim.a_max) {
                return Err(Error::validation(
                    field("a0"),
                    format!("{} outside [{}, {}]", a.a0, lim.a_min, lim.a_max),
                ));
            }
            if !(a.footprint_radius > 0.0) {
                return Err(Error::validation(
                    field("footprint_radius"),
                    "must be positive",
                ));
            }
            if !(a.s0 >= 0.0) {
                return Err(Error::validation(field("s0"), "must be non-negative"));
            }
            a.cost
                .resolve(lim.v_max)
                .validate()
                .map_err(|e| Error::validation(field("cost"), e.to_string()))?;
            if a.controller == ControllerKind::Cooperative {
                self.safety
                    .validate(Some(&lim))
                    .map_err(|e| Error::validation(field("limits"), e.to_string()))?;
            }
            if a.controller != ControllerKind::Ignorant && !a.script.is_empty() {
                return Err(Error::validation(
                    field("script"),
                    "only ignorant agents follow a script",
                ));
            }
            if a.script.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                return Err(Error::validation(
                    field("script"),
                    "start times must increase",
                ));
            }
        }
        if !self.routes.is_empty() {
            let total: f64 = self.routes.iter().map(|r| r.probability).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::validation(
                    "routes",
                    format!("probabilities sum to {total}, expected 1"),
                ));
            }
            for (i, r) in self.routes.iter().enumerate() {
                if !(r.probability >= 0.0) {
                    return Err(Error::validation(
                        format!("routes[{i}].probability"),
                        "must be non-negative",
                    ));
                }
                for (agent, path) in &r.paths {
                    if !agent_ids.contains_key(agent.as_str()) {
                        return Err(Error::validation(
                            format!("routes[{i}].paths"),
                            format!("unknown agent '{agent}'"),
                        ));
                    }
                    if !path_ids.contains_key(path.as_str()) {
                        return Err(Error::validation(
                            format!("routes[{i}].paths.{agent}"),
                            format!("unknown path '{path}'"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

impl ScenarioSpec {
    /// Copy with one addressable parameter replaced, revalidated.
    ///
    /// Addressable: `seed`, `end_time`, `route_probability:<route>` (the
    /// other routes are rescaled to keep the sum at one), and
    /// `agents.<id>.s0`, `agents.<id>.v0`, `agents.<id>.a0`.
    pub fn with_param(&self, param: &str, value: f64) -> Result<ScenarioSpec> {
        let mut spec = self.clone();
        let unknown = || Error::invalid(format!("parameter '{param}' is not addressable"));
        if param == "seed" {
            if !(value >= 0.0 && value.fract() == 0.0 && value <= u64::MAX as f64) {
                return Err(Error::invalid(format!(
                    "seed must be a non-negative integer, got {value}"
                )));
            }
            spec.sim.seed = value as u64;
        } else if param == "end_time" {
            spec.sim.end_time = value;
        } else if let Some(route) = param.strip_prefix("route_probability:") {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::invalid(format!(
                    "probability must lie in [0, 1], got {value}"
                )));
            }
            let idx = spec
                .routes
                .iter()
                .position(|r| r.id == route)
                .ok_or_else(unknown)?;
            let rest: f64 = spec
                .routes
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != idx)
                .map(|(_, r)| r.probability)
                .sum();
            let others = spec.routes.len() - 1;
            for (i, r) in spec.routes.iter_mut().enumerate() {
                r.probability = if i == idx {
                    value
                } else if rest > 0.0 {
                    r.probability / rest * (1.0 - value)
                } else {
                    (1.0 - value) / others as f64
                };
            }
        } else if let Some(tail) = param.strip_prefix("agents.") {
            let (id, field) = tail.rsplit_once('.').ok_or_else(unknown)?;
            let agent = spec
                .agents
                .iter_mut()
                .find(|a| a.id == id)
                .ok_or_else(unknown)?;
            match field {
                "s0" => agent.s0 = value,
                "v0" => agent.v0 = value,
                "a0" => agent.a0 = value,
                _ => return Err(unknown()),
            }
        } else {
            return Err(unknown());
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Everything derived from a validated spec that stays fixed during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub paths: BTreeMap<String, Path>,
    pub agents: Vec<AgentSetup>,
    /// Zones between the driven paths.
    pub zones: Vec<CollisionZone>,
    pub routes: Vec<RouteHypothesis>,
    pub grid: TimeGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSetup {
    pub id: AgentId,
    pub controller: ControllerKind,
    pub path: String,
    pub initial: LongitudinalState,
    pub limits: KinematicLimits,
    pub params: CostParams,
    pub footprint_radius: f64,
    pub goal: f64,
    pub script: Vec<[f64; 2]>,
}

fn zones_between(
    agents: &[AgentSpec],
    assignment: &BTreeMap<AgentId, &Path>,
) -> Vec<CollisionZone> {
    let mut out = Vec::new();
    for (i, a) in agents.iter().enumerate() {
        for b in &agents[i + 1..] {
            let (pa, pb) = (assignment[&a.id], assignment[&b.id]);
            for mut z in find_collision_zones(pa, pb, a.footprint_radius, b.footprint_radius) {
                z = z.with_agents(a.id.clone(), b.id.clone());
                z.priority = match (a.right_of_way, b.right_of_way) {
                    (true, false) => Some(a.id.clone()),
                    (false, true) => Some(b.id.clone()),
                    _ => None,
                };
                out.push(z);
            }
        }
    }
    out
}

impl World {
    pub fn build(spec: &ScenarioSpec) -> Result<World> {
        spec.validate()?;
        let mut paths = BTreeMap::new();
        for (i, p) in spec.paths.iter().enumerate() {
            let pts: Vec<Point> = p.points.iter().map(|&q| q.into()).collect();
            let path = build_path(&pts, p.lane_width, spec.sim.path_step)
                .map_err(|e| Error::validation(format!("paths[{i}]"), e.to_string()))?
                .with_id(p.id.clone());
            paths.insert(p.id.clone(), path);
        }
        let mut agents = Vec::with_capacity(spec.agents.len());
        for (i, a) in spec.agents.iter().enumerate() {
            let limits = a.limits.unwrap_or_default();
            let path = &paths[&a.path];
            if a.s0 >= path.length() {
                return Err(Error::validation(
                    format!("agents[{i}].s0"),
                    "lies beyond the end of the path",
                ));
            }
            agents.push(AgentSetup {
                id: a.id.clone(),
                controller: a.controller,
                path: a.path.clone(),
                initial: LongitudinalState::new(a.s0, a.v0, a.a0, 0.0),
                limits,
                params: a.cost.resolve(limits.v_max),
                footprint_radius: a.footprint_radius,
                goal: a.goal.unwrap_or(path.length()),
                script: a.script.clone(),
            });
        }
        let driven: BTreeMap<AgentId, &Path> = spec
            .agents
            .iter()
            .map(|a| (a.id.clone(), &paths[&a.path]))
            .collect();
        let zones = zones_between(&spec.agents, &driven);

        let route_specs = if spec.routes.is_empty() {
            vec![RouteSpec {
                id: "default".into(),
                probability: 1.0,
                paths: BTreeMap::new(),
            }]
        } else {
            spec.routes.clone()
        };
        let mut routes = Vec::with_capacity(route_specs.len());
        for r in &route_specs {
            let assignment: BTreeMap<AgentId, &Path> = spec
                .agents
                .iter()
                .map(|a| (a.id.clone(), &paths[r.paths.get(&a.id).unwrap_or(&a.path)]))
                .collect();
            routes.push(RouteHypothesis {
                id: r.id.clone(),
                probability: r.probability,
                zones: zones_between(&spec.agents, &assignment),
                paths: assignment
                    .into_iter()
                    .map(|(k, p)| (k, p.clone()))
                    .collect(),
            });
        }
        Ok(World {
            paths,
            agents,
            zones,
            routes,
            grid: TimeGrid {
                action_dt: spec.sim.action_dt,
                dt: spec.sim.cost_dt,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[paths]]
id = "a"
points = [[0.0, 0.0], [100.0, 0.0]]

[[paths]]
id = "b"
points = [[50.0, -50.0], [50.0, 50.0]]

[[agents]]
id = "ego"
controller = "cooperative"
path = "a"
v0 = 8.0

[[agents]]
id = "other"
controller = "ignorant"
path = "b"
v0 = 8.0
right_of_way = true
"#;

    #[test]
    fn minimal_scenario_builds() {
        let spec = parse_scenario(MINIMAL).unwrap();
        let world = World::build(&spec).unwrap();
        assert_eq!(world.zones.len(), 1);
        assert_eq!(world.zones[0].priority.as_deref(), Some("other"));
        assert_eq!(world.routes.len(), 1);
        assert_eq!(world.routes[0].zones, world.zones);
        assert_eq!(world.agents[0].goal, 100.0);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_scenario("[[paths]]\nid = \n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn route_probabilities_must_sum_to_one() {
        let text = format!(
            "{MINIMAL}\n[[routes]]\nid = \"r1\"\nprobability = 0.6\n[[routes]]\nid = \"r2\"\nprobability = 0.3\n"
        );
        let err = parse_scenario(&text).unwrap_err();
        assert!(err.to_string().starts_with("routes:"), "{err}");
    }

    #[test]
    fn missing_path_names_the_agent() {
        let text = MINIMAL.replace("path = \"b\"", "path = \"nowhere\"");
        let err = parse_scenario(&text).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("agents[1].path") && msg.contains("'other'"),
            "{msg}"
        );
    }

    #[test]
    fn initial_state_must_respect_limits() {
        let text = MINIMAL.replace("v0 = 8.0\nright_of_way", "v0 = 80.0\nright_of_way");
        assert!(parse_scenario(&text)
            .unwrap_err()
            .to_string()
            .contains("agents[1].v0"));
    }

    #[test]
    fn round_trips_through_toml() {
        let spec = parse_scenario(MINIMAL).unwrap();
        let again = parse_scenario(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn parameters_are_addressable() {
        let text = format!(
            "{MINIMAL}\n[[routes]]\nid = \"r1\"\nprobability = 0.5\n[[routes]]\nid = \"r2\"\nprobability = 0.3\n[[routes]]\nid = \"r3\"\nprobability = 0.2\n"
        );
        let spec = parse_scenario(&text).unwrap();
        let moved = spec.with_param("route_probability:r1", 0.9).unwrap();
        let p: Vec<f64> = moved.routes.iter().map(|r| r.probability).collect();
        assert!(
            (p[0] - 0.9).abs() < 1e-12
                && (p[1] - 0.06).abs() < 1e-12
                && (p[2] - 0.04).abs() < 1e-12
        );
        assert_eq!(
            spec.with_param("agents.other.s0", 12.0).unwrap().agents[1].s0,
            12.0
        );
        assert_eq!(spec.with_param("seed", 5.0).unwrap().sim.seed, 5);
        assert!(spec.with_param("agents.other.colour", 1.0).is_err());
        assert!(spec.with_param("gravity", 1.0).is_err());
        assert!(spec.with_param("agents.ego.v0", 99.0).is_err());
    }
}
