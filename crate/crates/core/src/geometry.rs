//! Arc-length parametrized paths and pairwise collision zones.
//!
//! Paths are resampled polylines. Each vehicle is modeled as a disk of
//! fixed radius centered on its path, so a collision zone between two
//! paths is the set of arc-length pairs whose disks can touch, stored as
//! one interval per path.

use serde::{Deserialize, Serialize};

use crate::{AgentId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn lerp(self, other: Point, f: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * f,
            self.y + (other.y - self.y) * f,
        )
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Point::new(p[0], p[1])
    }
}

/// Closed arc-length interval `[s_in, s_out]` on one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub s_in: f64,
    pub s_out: f64,
}

impl Interval {
    pub fn new(s_in: f64, s_out: f64) -> Self {
        Interval { s_in, s_out }
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.s_in && s <= self.s_out
    }

    pub fn length(&self) -> f64 {
        self.s_out - self.s_in
    }

    fn touches(&self, other: &Interval, tol: f64) -> bool {
        self.s_in <= other.s_out + tol && other.s_in <= self.s_out + tol
    }

    fn hull(&self, other: &Interval) -> Interval {
        Interval::new(self.s_in.min(other.s_in), self.s_out.max(other.s_out))
    }
}

/// A polyline resampled at uniform arc-length spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub id: String,
    pub waypoints: Vec<Point>,
    pub cumulative_s: Vec<f64>,
    pub curvature: Vec<f64>,
    pub lane_width: f64,
}

/// Pose and curvature at one arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub position: Point,
    pub heading: f64,
    pub curvature: f64,
}

/// Resamples `centerline` at uniform spacing no larger than `step`.
///
/// Consecutive duplicate points are dropped. Fails when fewer than two
/// distinct points remain or the total length is shorter than `step`.
pub fn build_path(centerline: &[Point], lane_width: f64, step: f64) -> Result<Path> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    if !(lane_width > 0.0) {
        return Err(Error::invalid(format!(
            "lane width must be positive, got {lane_width}"
        )));
    }
    if centerline
        .iter()
        .any(|p| !p.x.is_finite() || !p.y.is_finite())
    {
        return Err(Error::invalid("centerline contains non-finite coordinates"));
    }
    let mut pts: Vec<Point> = Vec::with_capacity(centerline.len());
    for &p in centerline {
        if pts.last().is_none_or(|&q| q.distance(p) > 0.0) {
            pts.push(p);
        }
    }
    if pts.len() < 2 {
        return Err(Error::invalid(
            "centerline needs at least two distinct points",
        ));
    }
    let mut along = Vec::with_capacity(pts.len());
    along.push(0.0);
    for w in pts.windows(2) {
        along.push(along.last().unwrap() + w[0].distance(w[1]));
    }
    let total = *along.last().unwrap();
    if total < step {
        return Err(Error::invalid(format!(
            "centerline length {total} is shorter than step {step}"
        )));
    }

    let n = (total / step).ceil() as usize;
    let spacing = total / n as f64;
    let mut waypoints = Vec::with_capacity(n + 1);
    let mut seg = 0;
    for k in 0..=n {
        let target = if k == n { total } else { k as f64 * spacing };
        while seg + 2 < along.len() && along[seg + 1] < target {
            seg += 1;
        }
        let len = along[seg + 1] - along[seg];
        let f = ((target - along[seg]) / len).clamp(0.0, 1.0);
        waypoints.push(pts[seg].lerp(pts[seg + 1], f));
    }

    // Chords can cut corners of the input polyline, so arc length is
    // measured on the resampled points themselves.
    let mut cumulative_s = Vec::with_capacity(waypoints.len());
    cumulative_s.push(0.0);
    for w in waypoints.windows(2) {
        cumulative_s.push(cumulative_s.last().unwrap() + w[0].distance(w[1]));
    }

    let curvature = discrete_curvature(&waypoints);
    Ok(Path {
        id: String::new(),
        waypoints,
        cumulative_s,
        curvature,
        lane_width,
    })
}

/// Signed curvature of the circle through three points.
pub fn three_point_curvature(a: Point, b: Point, c: Point) -> f64 {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let denom = a.distance(b) * b.distance(c) * c.distance(a);
    if denom <= f64::EPSILON {
        0.0
    } else {
        2.0 * cross / denom
    }
}

fn discrete_curvature(w: &[Point]) -> Vec<f64> {
    let n = w.len();
    let mut k = vec![0.0; n];
    if n < 3 {
        return k;
    }
    for i in 1..n - 1 {
        k[i] = three_point_curvature(w[i - 1], w[i], w[i + 1]);
    }
    k[0] = k[1];
    k[n - 1] = k[n - 2];
    k
}

impl Path {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn length(&self) -> f64 {
        *self.cumulative_s.last().unwrap()
    }

    /// Largest spacing between consecutive waypoints.
    pub fn max_spacing(&self) -> f64 {
        self.cumulative_s
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    fn segment_index(&self, s: f64) -> usize {
        let n = self.cumulative_s.len();
        match self
            .cumulative_s
            .binary_search_by(|probe| probe.total_cmp(&s))
        {
            Ok(k) => k.min(n - 2),
            Err(k) => (k.max(1) - 1).min(n - 2),
        }
    }

    /// Position, heading and curvature at arc length `s`.
    pub fn point_at(&self, s: f64) -> Result<PathPoint> {
        let total = self.length();
        if !(0.0..=total).contains(&s) {
            return Err(Error::Domain(format!(
                "arc length {s} outside [0, {total}]"
            )));
        }
        Ok(self.point_at_clamped(s))
    }

    /// Like [`Path::point_at`], clamping `s` into the path's range.
    pub fn point_at_clamped(&self, s: f64) -> PathPoint {
        let s = s.clamp(0.0, self.length());
        let k = self.segment_index(s);
        let (p0, p1) = (self.waypoints[k], self.waypoints[k + 1]);
        let (s0, s1) = (self.cumulative_s[k], self.cumulative_s[k + 1]);
        let heading = (p1.y - p0.y).atan2(p1.x - p0.x);
        let f = (s - s0) / (s1 - s0);
        let position = if s == s0 {
            p0
        } else if s == s1 {
            p1
        } else {
            p0.lerp(p1, f)
        };
        let curvature = self.curvature[k] + (self.curvature[k + 1] - self.curvature[k]) * f;
        PathPoint {
            position,
            heading,
            curvature,
        }
    }

    /// Curvature at `s`, clamped into the path's range.
    pub fn curvature_at(&self, s: f64) -> f64 {
        self.point_at_clamped(s).curvature
    }

    fn segment_bounds(&self, k: usize, pad: f64) -> [f64; 4] {
        let (a, b) = (self.waypoints[k], self.waypoints[k + 1]);
        [
            a.x.min(b.x) - pad,
            a.y.min(b.y) - pad,
            a.x.max(b.x) + pad,
            a.y.max(b.y) + pad,
        ]
    }
}

/// Region where two agents' footprints can overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionZone {
    pub agent_a: AgentId,
    pub agent_b: AgentId,
    pub interval_a: Interval,
    pub interval_b: Interval,
    /// Agent with right of way through this zone, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<AgentId>,
    /// Sum of the two footprint radii the zone was built for.
    #[serde(default)]
    pub reach: f64,
    /// Both paths run roughly the same way through the zone (merging or
    /// following), as opposed to crossing or oncoming.
    #[serde(default)]
    pub co_directional: bool,
}

impl CollisionZone {
    pub fn with_agents(mut self, a: impl Into<AgentId>, b: impl Into<AgentId>) -> Self {
        self.agent_a = a.into();
        self.agent_b = b.into();
        self
    }

    pub fn involves(&self, agent: &str) -> bool {
        self.agent_a == agent || self.agent_b == agent
    }

    /// The interval on `agent`'s path.
    pub fn interval_for(&self, agent: &str) -> Option<Interval> {
        if self.agent_a == agent {
            Some(self.interval_a)
        } else if self.agent_b == agent {
            Some(self.interval_b)
        } else {
            None
        }
    }

    pub fn partner_of(&self, agent: &str) -> Option<&AgentId> {
        if self.agent_a == agent {
            Some(&self.agent_b)
        } else if self.agent_b == agent {
            Some(&self.agent_a)
        } else {
            None
        }
    }

    /// The same zone with roles swapped.
    pub fn swapped(&self) -> CollisionZone {
        CollisionZone {
            agent_a: self.agent_b.clone(),
            agent_b: self.agent_a.clone(),
            interval_a: self.interval_b,
            interval_b: self.interval_a,
            priority: self.priority.clone(),
            reach: self.reach,
            co_directional: self.co_directional,
        }
    }
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(Point::new(a.x + t * dx, a.y + t * dy))
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Minimum distance between two closed segments.
pub fn segment_distance(a0: Point, a1: Point, b0: Point, b1: Point) -> f64 {
    let d1 = orient(a0, a1, b0);
    let d2 = orient(a0, a1, b1);
    let d3 = orient(b0, b1, a0);
    let d4 = orient(b0, b1, a1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return 0.0;
    }
    point_segment_distance(a0, b0, b1)
        .min(point_segment_distance(a1, b0, b1))
        .min(point_segment_distance(b0, a0, a1))
        .min(point_segment_distance(b1, a0, a1))
}

/// Collision zones between two paths for disk footprints of the given radii.
///
/// A segment pair is flagged when the closed segments come within the sum
/// of radii, which makes the result a conservative cover of every touching
/// arc-length pair. Flagged pairs are grouped into 8-connected components;
/// components closer than one discretization step on both paths merge.
/// The zones carry the path ids as agent ids until relabeled with
/// [`CollisionZone::with_agents`].
pub fn find_collision_zones(
    path_a: &Path,
    path_b: &Path,
    footprint_radius_a: f64,
    footprint_radius_b: f64,
) -> Vec<CollisionZone> {
    let reach = footprint_radius_a + footprint_radius_b;
    let na = path_a.waypoints.len() - 1;
    let nb = path_b.waypoints.len() - 1;

    let boxes_b: Vec<[f64; 4]> = (0..nb).map(|j| path_b.segment_bounds(j, 0.0)).collect();
    let rows: Vec<Vec<usize>> = crate::par::map_range(na, |i| {
        let bb = path_a.segment_bounds(i, reach);
        let (a0, a1) = (path_a.waypoints[i], path_a.waypoints[i + 1]);
        boxes_b
            .iter()
            .enumerate()
            .filter(|(_, b)| b[0] <= bb[2] && bb[0] <= b[2] && b[1] <= bb[3] && bb[1] <= b[3])
            .filter(|&(j, _)| {
                segment_distance(a0, a1, path_b.waypoints[j], path_b.waypoints[j + 1]) <= reach
            })
            .map(|(j, _)| j)
            .collect()
    });

    // Connected components over the sparse flagged set.
    let flagged: Vec<(usize, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, js)| js.iter().map(move |&j| (i, j)))
        .collect();
    let mut offsets = Vec::with_capacity(rows.len());
    let mut acc = 0;
    for js in &rows {
        offsets.push(acc);
        acc += js.len();
    }
    let index_of = |i: usize, j: usize| -> Option<usize> {
        rows.get(i)?
            .binary_search(&j)
            .ok()
            .map(|pos| offsets[i] + pos)
    };
    let mut parent: Vec<usize> = (0..flagged.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, js) in rows.iter().enumerate() {
        for (pos, &j) in js.iter().enumerate() {
            let me = offsets[i] + pos;
            // Neighbors already visited: same row j-1, previous row j-1..=j+1.
            let mut neighbors = Vec::with_capacity(4);
            if pos > 0 && js[pos - 1] + 1 == j {
                neighbors.push(me - 1);
            }
            if i > 0 {
                for dj in [-1i64, 0, 1] {
                    let jj = j as i64 + dj;
                    if jj >= 0 {
                        if let Some(n) = index_of(i - 1, jj as usize) {
                            neighbors.push(n);
                        }
                    }
                }
            }
            for n in neighbors {
                let (ra, rb) = (find(&mut parent, me), find(&mut parent, n));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }

    let mut groups: std::collections::BTreeMap<usize, (Interval, Interval)> = Default::default();
    for (idx, &(i, j)) in flagged.iter().enumerate() {
        let root = find(&mut parent, idx);
        let ia = Interval::new(path_a.cumulative_s[i], path_a.cumulative_s[i + 1]);
        let ib = Interval::new(path_b.cumulative_s[j], path_b.cumulative_s[j + 1]);
        groups
            .entry(root)
            .and_modify(|(ga, gb)| {
                *ga = ga.hull(&ia);
                *gb = gb.hull(&ib);
            })
            .or_insert((ia, ib));
    }

    let tol_a = path_a.max_spacing();
    let tol_b = path_b.max_spacing();
    let mut spans: Vec<(Interval, Interval)> = groups.into_values().collect();
    loop {
        let mut merged = false;
        'outer: for x in 0..spans.len() {
            for y in x + 1..spans.len() {
                if spans[x].0.touches(&spans[y].0, tol_a) && spans[x].1.touches(&spans[y].1, tol_b)
                {
                    let other = spans.remove(y);
                    spans[x] = (spans[x].0.hull(&other.0), spans[x].1.hull(&other.1));
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    spans.sort_by(|x, y| {
        x.0.s_in
            .total_cmp(&y.0.s_in)
            .then(x.1.s_in.total_cmp(&y.1.s_in))
    });
    spans
        .into_iter()
        .map(|(interval_a, interval_b)| {
            let ha = path_a
                .point_at_clamped(0.5 * (interval_a.s_in + interval_a.s_out))
                .heading;
            let hb = path_b
                .point_at_clamped(0.5 * (interval_b.s_in + interval_b.s_out))
                .heading;
            CollisionZone {
                agent_a: path_a.id.clone(),
                agent_b: path_b.id.clone(),
                interval_a,
                interval_b,
                priority: None,
                reach,
                co_directional: (ha - hb).cos() > std::f64::consts::FRAC_1_SQRT_2,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn straight(from: Point, to: Point) -> Path {
        build_path(&[from, to], 3.5, 0.5).unwrap()
    }

    #[test]
    fn straight_segment_resamples_to_uniform_grid() {
        let p = straight(Point::new(0.0, 0.0), Point::new(100.0, 0.0));
        assert_eq!(p.waypoints.len(), 201);
        assert!(p.curvature.iter().all(|k| k.abs() < 1e-9));
        for (k, s) in p.cumulative_s.iter().enumerate() {
            assert_abs_diff_eq!(*s, 0.5 * k as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn circular_arc_has_inverse_radius_curvature() {
        let r = 20.0;
        let centerline: Vec<Point> = (0..=2000)
            .map(|k| {
                let th = std::f64::consts::FRAC_PI_2 * k as f64 / 2000.0;
                Point::new(r * th.cos(), r * th.sin())
            })
            .collect();
        let p = build_path(&centerline, 3.5, 0.5).unwrap();
        for k in 1..p.waypoints.len() - 1 {
            // Oracle: circumscribed circle radius R = abc / (4 * area).
            let (a, b, c) = (p.waypoints[k - 1], p.waypoints[k], p.waypoints[k + 1]);
            let (la, lb, lc) = (a.distance(b), b.distance(c), c.distance(a));
            let area = 0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs();
            let radius = la * lb * lc / (4.0 * area);
            assert_abs_diff_eq!(p.curvature[k].abs(), 1.0 / radius, epsilon = 1e-9);
            assert!(
                (p.curvature[k] - 0.05).abs() < 1e-3,
                "k={k}: {}",
                p.curvature[k]
            );
        }
        assert_eq!(p.curvature[0], p.curvature[1]);
    }

    #[test]
    fn degenerate_centerlines_are_rejected() {
        let p = Point::new(1.0, 1.0);
        assert!(matches!(
            build_path(&[p, p], 3.5, 0.5),
            Err(Error::InvalidInput(_))
        ));
        assert!(build_path(&[p], 3.5, 0.5).is_err());
        assert!(build_path(&[p, Point::new(1.2, 1.0)], 3.5, 0.5).is_err());
        assert!(build_path(&[p, Point::new(5.0, 1.0)], 3.5, 0.0).is_err());
    }

    #[test]
    fn spacing_never_exceeds_step() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(3.3, 0.0),
            Point::new(3.3, 7.1),
            Point::new(-2.0, 9.0),
        ];
        let p = build_path(&pts, 3.0, 0.5).unwrap();
        assert!(p.max_spacing() <= 0.5 + 1e-12);
        for (k, w) in p.waypoints.windows(2).enumerate() {
            let d = p.cumulative_s[k + 1] - p.cumulative_s[k];
            assert_abs_diff_eq!(d, w[0].distance(w[1]), epsilon = 1e-9);
            assert!(d > 0.0);
        }
    }

    #[test]
    fn point_at_interpolates_and_hits_waypoints() {
        let p = straight(Point::new(0.0, 0.0), Point::new(100.0, 0.0));
        let q = p.point_at(10.0).unwrap();
        assert_eq!(q.position, Point::new(10.0, 0.0));
        assert_eq!(q.heading, 0.0);
        assert_eq!(
            p.point_at(100.0).unwrap().position,
            *p.waypoints.last().unwrap()
        );
        let mid = p.point_at(10.25).unwrap().position;
        assert_abs_diff_eq!(mid.x, 10.25, epsilon = 1e-12);
        for k in [0, 7, 200] {
            assert_eq!(
                p.point_at(p.cumulative_s[k]).unwrap().position,
                p.waypoints[k]
            );
        }
        assert!(matches!(p.point_at(100.1), Err(Error::Domain(_))));
        assert!(p.point_at(-0.1).is_err());
    }

    #[test]
    fn parallel_paths_have_no_zone() {
        let a = straight(Point::new(0.0, 0.0), Point::new(100.0, 0.0));
        let b = straight(Point::new(0.0, 10.0), Point::new(100.0, 10.0));
        assert!(find_collision_zones(&a, &b, 1.0, 1.0).is_empty());
    }

    #[test]
    fn perpendicular_crossing_matches_grid_oracle() {
        let a = straight(Point::new(-50.0, 0.0), Point::new(50.0, 0.0));
        let b = straight(Point::new(0.0, -50.0), Point::new(0.0, 50.0));
        let zones = find_collision_zones(&a, &b, 1.0, 1.0);
        assert_eq!(zones.len(), 1);
        // Brute force over the 0.5 m grid of (s_a, s_b) pairs.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, pa) in a.waypoints.iter().enumerate() {
            for pb in &b.waypoints {
                if pa.distance(*pb) <= 2.0 {
                    lo = lo.min(a.cumulative_s[i]);
                    hi = hi.max(a.cumulative_s[i]);
                }
            }
        }
        assert_abs_diff_eq!(lo, 48.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hi, 52.0, epsilon = 1e-9);
        let z = &zones[0];
        assert!((z.interval_a.s_in - lo).abs() <= 0.5 + 1e-9);
        assert!((z.interval_a.s_out - hi).abs() <= 0.5 + 1e-9);
        assert!((z.interval_b.s_in - 48.0).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn identical_paths_form_one_full_zone() {
        let a = straight(Point::new(0.0, 0.0), Point::new(40.0, 0.0));
        let zones = find_collision_zones(&a, &a, 1.0, 1.0);
        assert_eq!(zones.len(), 1);
        assert_eq!(zones[0].interval_a, Interval::new(0.0, 40.0));
        assert_eq!(zones[0].interval_b, Interval::new(0.0, 40.0));
        assert!(zones[0].co_directional);
        assert_eq!(zones[0].reach, 2.0);
    }

    #[test]
    fn zone_helpers_resolve_roles() {
        let a = straight(Point::new(-10.0, 0.0), Point::new(10.0, 0.0)).with_id("pa");
        let b = straight(Point::new(0.0, -10.0), Point::new(0.0, 10.0)).with_id("pb");
        let z = find_collision_zones(&a, &b, 1.0, 1.0)
            .remove(0)
            .with_agents("x", "y");
        assert_eq!(z.interval_for("x"), Some(z.interval_a));
        assert_eq!(z.partner_of("y").map(String::as_str), Some("x"));
        assert!(z.interval_for("q").is_none());
        let s = z.swapped();
        assert_eq!(s.interval_a, z.interval_b);
        assert_eq!(s.agent_a, "y");
    }
}
