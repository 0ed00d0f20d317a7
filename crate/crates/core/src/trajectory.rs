//! Piecewise-constant-jerk longitudinal trajectories.
//!
//! Motion along a path is described by arc length, speed and acceleration.
//! Integration is analytic: within each constant-jerk piece the state is a
//! cubic in time, split at the instants where a clamp engages. Speed is
//! clamped to `[0, v_max]` (with acceleration zeroed while clamped) and
//! acceleration to `[a_min, a_max]`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Interval;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LongitudinalState {
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub t: f64,
}

impl LongitudinalState {
    pub fn new(s: f64, v: f64, a: f64, t: f64) -> Self {
        LongitudinalState { s, v, a, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinematicLimits {
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub j_min: f64,
    pub j_max: f64,
}

impl Default for KinematicLimits {
    fn default() -> Self {
        KinematicLimits {
            v_max: 15.0,
            a_min: -8.0,
            a_max: 2.0,
            j_min: -4.0,
            j_max: 2.0,
        }
    }
}

impl KinematicLimits {
    pub fn validate(&self) -> Result<()> {
        let ok = self.v_max > 0.0
            && self.a_min < 0.0
            && self.a_max > 0.0
            && self.j_min < 0.0
            && self.j_max > 0.0
            && [self.v_max, self.a_min, self.a_max, self.j_min, self.j_max]
                .iter()
                .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "inconsistent kinematic limits {self:?}"
            )))
        }
    }

    pub fn admits(&self, st: &LongitudinalState) -> bool {
        st.v >= 0.0 && st.v <= self.v_max && st.a >= self.a_min && st.a <= self.a_max
    }
}

/// Spacing of action intervals and of dense samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub action_dt: f64,
    pub dt: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid {
            action_dt: 1.0,
            dt: 0.1,
        }
    }
}

impl TimeGrid {
    pub fn steps_per_action(&self) -> usize {
        ((self.action_dt / self.dt).round() as usize).max(1)
    }

    /// Number of action intervals covering `horizon`.
    pub fn intervals(&self, horizon: f64) -> usize {
        ((horizon / self.action_dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Smallest root in `(eps, limit]` of `c2 t^2 + c1 t + c0 = 0`.
fn first_root(c2: f64, c1: f64, c0: f64, limit: f64) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let mut roots = [f64::NAN; 2];
    if c2.abs() < 1e-15 {
        if c1.abs() > 1e-15 {
            roots[0] = -c0 / c1;
        }
    } else {
        let disc = c1 * c1 - 4.0 * c2 * c0;
        if disc < 0.0 {
            return None;
        }
        let q = -0.5 * (c1 + c1.signum() * disc.sqrt());
        if q != 0.0 {
            roots[0] = q / c2;
            roots[1] = c0 / q;
        } else {
            roots[0] = 0.0;
        }
    }
    roots
        .into_iter()
        .filter(|r| r.is_finite() && *r > EPS && *r <= limit)
        .min_by(f64::total_cmp)
}

/// Advances `st` by `tau` under commanded jerk `jerk`, honoring all clamps.
///
/// The jerk is first clamped into `[j_min, j_max]`.
pub fn advance(
    st: LongitudinalState,
    jerk: f64,
    tau: f64,
    limits: &KinematicLimits,
) -> LongitudinalState {
    propagate(st, jerk, tau, limits, false)
}

fn propagate(
    st: LongitudinalState,
    jerk: f64,
    tau: f64,
    lim: &KinematicLimits,
    until_stop: bool,
) -> LongitudinalState {
    let j = jerk.clamp(lim.j_min, lim.j_max);
    let t_end = st.t + tau;
    let (mut s, mut v, mut a, mut t) = (
        st.s,
        st.v.clamp(0.0, lim.v_max),
        st.a.clamp(lim.a_min, lim.a_max),
        st.t,
    );
    // Speeds this close to a bound count as on it; the crossing time would
    // fall below the root finder's resolution.
    const V_EPS: f64 = 1e-9;
    for _ in 0..16 {
        let rem = t_end - t;
        if rem <= 0.0 {
            break;
        }
        if v <= V_EPS && a <= 0.0 {
            v = 0.0;
            a = 0.0;
            if j <= 0.0 {
                if until_stop {
                    return LongitudinalState::new(s, 0.0, 0.0, t);
                }
                t = t_end;
                break;
            }
        }
        if v >= lim.v_max - V_EPS && a >= 0.0 {
            v = lim.v_max;
            a = 0.0;
            if j >= 0.0 {
                s += v * rem;
                t = t_end;
                break;
            }
        }
        let je = if (a >= lim.a_max && j > 0.0) || (a <= lim.a_min && j < 0.0) {
            0.0
        } else {
            j
        };
        let mut h = rem;
        let mut event = Event::None;
        if je > 0.0 {
            let ta = (lim.a_max - a) / je;
            if ta < h {
                h = ta;
                event = Event::AccelBound(lim.a_max);
            }
        } else if je < 0.0 {
            let ta = (lim.a_min - a) / je;
            if ta < h {
                h = ta;
                event = Event::AccelBound(lim.a_min);
            }
        }
        // Speed starts inside [0, v_max]; the first positive root of either
        // bound is a genuine crossing of that bound.
        if let Some(tv) = first_root(0.5 * je, a, v, h) {
            h = tv;
            event = Event::Stop;
        }
        if let Some(tv) = first_root(0.5 * je, a, v - lim.v_max, h) {
            h = tv;
            event = Event::TopSpeed;
        }
        // Rounding near a tangential stop must not move the vehicle backwards.
        s += (v * h + 0.5 * a * h * h + je * h * h * h / 6.0).max(0.0);
        v += a * h + 0.5 * je * h * h;
        a += je * h;
        t += h;
        match event {
            Event::None => {}
            Event::AccelBound(bound) => a = bound,
            Event::Stop => {
                v = 0.0;
                a = 0.0;
            }
            Event::TopSpeed => {
                v = lim.v_max;
                a = 0.0;
            }
        }
        v = v.clamp(0.0, lim.v_max);
        a = a.clamp(lim.a_min, lim.a_max);
        if until_stop && v == 0.0 && j <= 0.0 {
            return LongitudinalState::new(s, 0.0, 0.0, t);
        }
    }
    LongitudinalState::new(s, v, a, t_end.max(t))
}

#[derive(Debug, Clone, Copy)]
enum Event {
    None,
    AccelBound(f64),
    Stop,
    TopSpeed,
}

/// State at which full braking (jerk `j_min` into `a_min`) comes to rest.
pub fn brake_to_stop(st: LongitudinalState, limits: &KinematicLimits) -> LongitudinalState {
    if st.v <= 0.0 && st.a <= 0.0 {
        return LongitudinalState::new(st.s, 0.0, 0.0, st.t);
    }
    // Bounded by reaching a_min and then decelerating from v_max.
    let horizon =
        (limits.a_max - limits.a_min) / -limits.j_min + limits.v_max / -limits.a_min + 1.0;
    propagate(st, limits.j_min, horizon, limits, true)
}

/// Distance covered by [`brake_to_stop`].
pub fn stopping_distance(st: LongitudinalState, limits: &KinematicLimits) -> f64 {
    brake_to_stop(st, limits).s - st.s
}

/// A longitudinal profile along one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub path_id: String,
    pub start: LongitudinalState,
    /// Commanded jerk per action interval, already clamped to jerk limits.
    pub jerks: Vec<f64>,
    pub grid: TimeGrid,
    pub limits: KinematicLimits,
    /// Dense states at `start.t + k * grid.dt`.
    pub samples: Vec<LongitudinalState>,
}

/// Integrates `jerks` from `start` and samples the result every `grid.dt`.
pub fn integrate(
    start: LongitudinalState,
    jerks: &[f64],
    limits: &KinematicLimits,
    grid: TimeGrid,
) -> Trajectory {
    let per = grid.steps_per_action();
    let dt = grid.action_dt / per as f64;
    let grid = TimeGrid { dt, ..grid };
    let jerks: Vec<f64> = jerks
        .iter()
        .map(|j| j.clamp(limits.j_min, limits.j_max))
        .collect();
    let mut samples = Vec::with_capacity(jerks.len() * per + 1);
    let mut st = LongitudinalState {
        v: start.v.clamp(0.0, limits.v_max),
        a: start.a.clamp(limits.a_min, limits.a_max),
        ..start
    };
    if st.v <= 0.0 && st.a < 0.0 {
        st.a = 0.0;
    }
    samples.push(st);
    for (m, &j) in jerks.iter().enumerate() {
        for k in 0..per {
            let mut next = advance(st, j, dt, limits);
            next.t = start.t + (m * per + k + 1) as f64 * dt;
            samples.push(next);
            st = next;
        }
    }
    Trajectory {
        path_id: String::new(),
        start: samples[0],
        jerks,
        grid,
        limits: *limits,
        samples,
    }
}

/// Times at which a trajectory enters and leaves an arc-length interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub enter: Option<f64>,
    pub exit: Option<f64>,
}

impl Crossing {
    pub fn never() -> Self {
        Crossing {
            enter: None,
            exit: None,
        }
    }

    /// Inside the interval at the end of the horizon.
    pub fn occupies_at_end(&self) -> bool {
        self.enter.is_some() && self.exit.is_none()
    }
}

impl Trajectory {
    pub fn with_path(mut self, path_id: impl Into<String>) -> Self {
        self.path_id = path_id.into();
        self
    }

    pub fn horizon(&self) -> f64 {
        self.jerks.len() as f64 * self.grid.action_dt
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().unwrap().t
    }

    pub fn end(&self) -> LongitudinalState {
        *self.samples.last().unwrap()
    }

    /// Commanded jerk active at absolute time `t` (zero past the horizon).
    pub fn jerk_at(&self, t: f64) -> f64 {
        let idx = ((t - self.start.t) / self.grid.action_dt + 1e-9).floor();
        if idx < 0.0 {
            return self.jerks.first().copied().unwrap_or(0.0);
        }
        self.jerks.get(idx as usize).copied().unwrap_or(0.0)
    }

    /// Exact state at absolute time `t`, clamped into the horizon.
    pub fn state_at(&self, t: f64) -> LongitudinalState {
        let rel = (t - self.start.t).max(0.0);
        let k = ((rel / self.grid.dt) + 1e-9).floor() as usize;
        if k >= self.samples.len() - 1 {
            return self.end();
        }
        let base = self.samples[k];
        let tau = t - base.t;
        if tau <= 0.0 {
            return base;
        }
        let per = self.grid.steps_per_action();
        advance(base, self.jerks[k / per], tau, &self.limits)
    }

    fn first_reaching(&self, s_target: f64) -> Option<f64> {
        if self.samples[0].s >= s_target {
            return Some(self.samples[0].t);
        }
        let k = self.samples.iter().position(|x| x.s >= s_target)?;
        let base = self.samples[k - 1];
        let per = self.grid.steps_per_action();
        let j = self.jerks[(k - 1) / per];
        let (mut lo, mut hi) = (0.0, self.samples[k].t - base.t);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if advance(base, j, mid, &self.limits).s >= s_target {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        Some(base.t + hi)
    }

    /// First times with `s >= s_in` and `s >= s_out`.
    pub fn zone_crossing_times(&self, interval: Interval) -> Crossing {
        let enter = self.first_reaching(interval.s_in);
        let exit = enter.and_then(|_| self.first_reaching(interval.s_out));
        Crossing { enter, exit }
    }

    /// Re-anchors the unexecuted remainder of this trajectory at `state`:
    /// the remaining commanded jerks are kept and padded with zeros to
    /// `intervals` actions. `state.t` must lie on an action boundary.
    pub fn continuation(&self, state: LongitudinalState, intervals: usize) -> Trajectory {
        let offset = ((state.t - self.start.t) / self.grid.action_dt)
            .round()
            .max(0.0) as usize;
        let mut jerks: Vec<f64> = self.jerks.iter().skip(offset).copied().collect();
        jerks.resize(intervals, 0.0);
        integrate(state, &jerks, &self.limits, self.grid).with_path(self.path_id.clone())
    }
}

/// Replaces `jerk` by the marginal jerk when holding it for one action
/// interval would leave the acceleration or speed limits.
pub fn marginal_jerk(
    st: &LongitudinalState,
    jerk: f64,
    limits: &KinematicLimits,
    action_dt: f64,
) -> f64 {
    let d = action_dt;
    let mut j = jerk;
    let a_end = st.a + j * d;
    if a_end > limits.a_max {
        j = (limits.a_max - st.a) / d;
    } else if a_end < limits.a_min {
        j = (limits.a_min - st.a) / d;
    }
    let v_end = st.v + st.a * d + 0.5 * j * d * d;
    if v_end > limits.v_max {
        j = 2.0 * (limits.v_max - st.v - st.a * d) / (d * d);
    } else if v_end < 0.0 {
        j = 2.0 * (-st.v - st.a * d) / (d * d);
    }
    j.clamp(limits.j_min, limits.j_max)
}

/// Parameters for [`sample_trajectory_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSpec<'a> {
    pub horizon: f64,
    pub jerk_values: &'a [f64],
    pub max_count: usize,
    pub seed: u64,
    /// Jerks fixed at the front of every candidate (already committed).
    pub prefix: &'a [f64],
}

/// Seeded random jerk sequences integrated into candidate trajectories.
///
/// Each interval draws uniformly from `jerk_values`; draws that would break
/// a kinematic limit are replaced by the marginal jerk. The first candidate
/// is the zero-jerk continuation when zero is an admissible value.
/// Candidates with identical jerk sequences are dropped.
pub fn sample_trajectory_set(
    start: LongitudinalState,
    limits: &KinematicLimits,
    grid: TimeGrid,
    spec: &SamplingSpec<'_>,
) -> Result<Vec<Trajectory>> {
    if spec.max_count < 1 {
        return Err(Error::invalid("max_count must be at least 1"));
    }
    if spec.jerk_values.is_empty() {
        return Err(Error::invalid("jerk value set is empty"));
    }
    if !(spec.horizon > 0.0) {
        return Err(Error::invalid(format!(
            "horizon must be positive, got {}",
            spec.horizon
        )));
    }
    let n = grid.intervals(spec.horizon).max(spec.prefix.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    let mut out = Vec::new();
    let has_zero = spec.jerk_values.contains(&0.0);
    let attempts = spec.max_count * 20;
    for attempt in 0..attempts {
        if out.len() >= spec.max_count {
            break;
        }
        let mut st = start;
        let mut jerks = Vec::with_capacity(n);
        for m in 0..n {
            let j = match spec.prefix.get(m) {
                Some(&j) => j.clamp(limits.j_min, limits.j_max),
                None => {
                    let raw = if attempt == 0 && has_zero {
                        0.0
                    } else {
                        *spec.jerk_values.choose(&mut rng).unwrap()
                    };
                    marginal_jerk(&st, raw, limits, grid.action_dt)
                }
            };
            st = advance(st, j, grid.action_dt, limits);
            jerks.push(j);
        }
        let key: Vec<u64> = jerks.iter().map(|j| (j + 0.0).to_bits()).collect();
        if seen.insert(key) {
            out.push(integrate(start, &jerks, limits, grid));
        }
    }
    Ok(out)
}
