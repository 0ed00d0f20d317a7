//! Property tests for the stated invariants of zones, costs, the ensemble
//! search and the safety layer.

use std::collections::BTreeMap;

use coplan::costs::{ensemble_cost, CostParams};
use coplan::geometry::{build_path, find_collision_zones, CollisionZone, Path, Point};
use coplan::planner::find_global_optimum;
use coplan::safety::{check_safe, Observed, SafetyCase, SafetyMonitor, SafetyParams};
use coplan::trajectory::{integrate, KinematicLimits, LongitudinalState, TimeGrid, Trajectory};
use proptest::prelude::*;

const STEP: f64 = 0.5;

fn line(from: (f64, f64), to: (f64, f64), step: f64) -> Path {
    build_path(
        &[Point::new(from.0, from.1), Point::new(to.0, to.1)],
        3.5,
        step,
    )
    .unwrap()
}

/// Path `a` runs west to east through the origin; `b` crosses it at `angle`.
fn crossing(angle: f64, step: f64) -> (Path, Path) {
    let (c, s) = (angle.cos(), angle.sin());
    (
        line((-40.0, 0.0), (40.0, 0.0), step).with_id("a"),
        line((40.0 * c, 40.0 * s), (-40.0 * c, -40.0 * s), step).with_id("b"),
    )
}

fn relabeled(zones: Vec<CollisionZone>) -> Vec<CollisionZone> {
    zones
        .into_iter()
        .map(|z| z.with_agents("ego", "other"))
        .collect()
}

fn traj(s0: f64, v0: f64, jerks: &[f64]) -> Trajectory {
    let grid = TimeGrid {
        action_dt: 1.0,
        dt: 0.1,
    };
    integrate(
        LongitudinalState::new(s0, v0, 0.0, 0.0),
        jerks,
        &KinematicLimits::default(),
        grid,
    )
}

fn jerks() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop::sample::select(vec![-2.0, -1.0, -0.5, 0.0, 0.5, 1.0]),
        6,
    )
}

fn scaled(
    params: &BTreeMap<String, CostParams>,
    agent: Option<&str>,
    factor: f64,
) -> BTreeMap<String, CostParams> {
    params
        .iter()
        .map(|(k, p)| {
            let p = if agent.is_none_or(|a| a == k) {
                p.scaled(factor)
            } else {
                *p
            };
            (k.clone(), p)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zones_are_symmetric(angle in 0.3f64..2.8) {
        let (a, b) = crossing(angle, STEP);
        let ab = find_collision_zones(&a, &b, 1.0, 1.0);
        let ba = find_collision_zones(&b, &a, 1.0, 1.0);
        prop_assert_eq!(ab.len(), ba.len());
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x.interval_a.s_in - y.interval_b.s_in).abs() < 1e-9);
            prop_assert!((x.interval_a.s_out - y.interval_b.s_out).abs() < 1e-9);
            prop_assert!((x.interval_b.s_in - y.interval_a.s_in).abs() < 1e-9);
            prop_assert!((x.interval_b.s_out - y.interval_a.s_out).abs() < 1e-9);
        }
    }

    #[test]
    fn overlapping_footprints_lie_in_a_zone(angle in 0.3f64..2.8, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let (a, b) = crossing(angle, STEP);
        let zones = find_collision_zones(&a, &b, 1.0, 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            // Sample near the crossing so that overlaps actually occur.
            let sa = 40.0 + rng.gen_range(-6.0..6.0);
            let sb = 40.0 + rng.gen_range(-6.0..6.0);
            let pa = a.point_at(sa).unwrap().position;
            let pb = b.point_at(sb).unwrap().position;
            if pa.distance(pb) < 2.0 {
                prop_assert!(zones.iter().any(|z| z.interval_a.contains(sa) && z.interval_b.contains(sb)),
                    "overlap at ({sa}, {sb}) outside every zone");
            }
        }
    }

    #[test]
    fn finer_resampling_moves_boundaries_by_at_most_one_step(angle in 0.3f64..2.8) {
        let (a, b) = crossing(angle, STEP);
        let (fa, fb) = crossing(angle, STEP / 2.0);
        let coarse = find_collision_zones(&a, &b, 1.0, 1.0);
        let fine = find_collision_zones(&fa, &fb, 1.0, 1.0);
        prop_assert_eq!(coarse.len(), fine.len());
        for (c, f) in coarse.iter().zip(&fine) {
            for (x, y) in [(c.interval_a, f.interval_a), (c.interval_b, f.interval_b)] {
                prop_assert!((x.s_in - y.s_in).abs() <= STEP + 1e-9);
                prop_assert!((x.s_out - y.s_out).abs() <= STEP + 1e-9);
            }
        }
    }

    #[test]
    fn ensemble_cost_decomposes_and_scales(
        angle in 0.5f64..2.6,
        s_ego in 10.0f64..35.0,
        s_other in 10.0f64..35.0,
        v_ego in 0.0f64..12.0,
        v_other in 0.0f64..12.0,
        j_ego in jerks(),
        j_other in jerks(),
        factor in 1.0f64..4.0,
    ) {
        let (a, b) = crossing(angle, STEP);
        let zones = relabeled(find_collision_zones(&a, &b, 1.0, 1.0));
        let paths = BTreeMap::from([("ego".to_string(), a), ("other".to_string(), b)]);
        let trajs = BTreeMap::from([
            ("ego".to_string(), traj(s_ego, v_ego, &j_ego)),
            ("other".to_string(), traj(s_other, v_other, &j_other)),
        ]);
        let params = BTreeMap::from([
            ("ego".to_string(), CostParams::dynamic(10.0)),
            ("other".to_string(), CostParams::dynamic(8.0)),
        ]);
        let cost = ensemble_cost(&trajs, &paths, &zones, &params).unwrap();

        // Reversed agent order in every zone.
        let swapped: Vec<CollisionZone> = zones.iter().map(CollisionZone::swapped).collect();
        let reversed = ensemble_cost(&trajs, &paths, &swapped, &params).unwrap();
        prop_assert_eq!(cost.feasible, reversed.feasible);
        if !cost.feasible {
            prop_assert!(cost.total.is_infinite());
            return Ok(());
        }
        let rel = (cost.total - cost.recomputed_total()).abs() / cost.total.abs().max(1e-12);
        prop_assert!(rel <= 1e-9);
        for agent in ["ego", "other"] {
            let heavier = ensemble_cost(&trajs, &paths, &zones, &scaled(&params, Some(agent), factor)).unwrap();
            prop_assert!(heavier.total >= cost.total - 1e-12 * cost.total.abs());
        }
    }

    #[test]
    fn uniform_weight_scaling_keeps_the_argmin(
        angle in 0.5f64..2.6,
        s_ego in 10.0f64..30.0,
        s_other in 10.0f64..30.0,
        sets in prop::collection::vec((jerks(), jerks()), 3..8),
        factor in 0.1f64..10.0,
    ) {
        let (a, b) = crossing(angle, STEP);
        let zones = relabeled(find_collision_zones(&a, &b, 1.0, 1.0));
        let paths = BTreeMap::from([("ego".to_string(), a), ("other".to_string(), b)]);
        let candidates = BTreeMap::from([
            ("ego".to_string(), sets.iter().map(|(j, _)| traj(s_ego, 8.0, j)).collect::<Vec<_>>()),
            ("other".to_string(), sets.iter().map(|(_, j)| traj(s_other, 8.0, j)).collect::<Vec<_>>()),
        ]);
        let params = BTreeMap::from([
            ("ego".to_string(), CostParams::dynamic(10.0)),
            ("other".to_string(), CostParams::dynamic(8.0)),
        ]);
        let budget = sets.len() * sets.len();
        let base = find_global_optimum(&candidates, &paths, &zones, &params, budget, 3).unwrap();
        let heavy = find_global_optimum(&candidates, &paths, &zones, &scaled(&params, None, factor), budget, 3).unwrap();
        prop_assert_eq!(base.map(|e| e.trajectories), heavy.map(|e| e.trajectories));
    }

    #[test]
    fn monitor_ticks_are_idempotent(
        s_ego in 0.0f64..40.0,
        v_ego in 0.0f64..15.0,
        s_other in 0.0f64..40.0,
        v_other in 0.0f64..15.0,
    ) {
        let (a, b) = crossing(std::f64::consts::FRAC_PI_2, STEP);
        let zones = relabeled(find_collision_zones(&a, &b, 1.0, 1.0));
        let ego = LongitudinalState::new(s_ego, v_ego, 0.0, 0.0);
        let plan = traj(s_ego, v_ego, &[0.0; 4]);
        let others = [Observed { id: "other", state: LongitudinalState::new(s_other, v_other, 0.0, 0.0) }];
        let params = SafetyParams::default();
        let mut monitor = SafetyMonitor::new();
        let first = monitor.tick(0.0, "ego", &ego, &others, &zones, &plan, &params, true);
        let latched = monitor.is_latched();
        let second = monitor.tick(0.0, "ego", &ego, &others, &zones, &plan, &params, true);
        prop_assert_eq!(first, second);
        prop_assert_eq!(latched, monitor.is_latched());
        prop_assert!(monitor.events.len() <= 1);
    }

    #[test]
    fn backing_off_never_breaks_can_stop(
        s_ego in 0.0f64..38.0,
        v_ego in 0.0f64..15.0,
        back in 0.0f64..30.0,
        s_other in 0.0f64..38.0,
        v_other in 0.0f64..15.0,
    ) {
        let (a, b) = crossing(std::f64::consts::FRAC_PI_2, STEP);
        let zone = &relabeled(find_collision_zones(&a, &b, 1.0, 1.0))[0];
        let params = SafetyParams::default();
        let other = LongitudinalState::new(s_other, v_other, 0.0, 0.0);
        let verdict = |s: f64| {
            let ego = LongitudinalState::new(s, v_ego, 0.0, 0.0);
            check_safe("ego", &ego, "other", &other, zone, &traj(s, v_ego, &[0.0; 4]), &params).unwrap()
        };
        if verdict(s_ego).case == SafetyCase::CanStop {
            let farther = verdict(s_ego - back);
            prop_assert!(farther.safe);
            prop_assert_eq!(farther.case, SafetyCase::CanStop);
        }
    }
}
