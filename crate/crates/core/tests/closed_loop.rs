//! Closed-loop properties of the simulator on the shipped fixtures.

use coplan::sim::{fixtures, run_scenario, ControlSource, ControllerKind, PathTimeDiagram, RunLog};

fn run(name: &str) -> RunLog {
    run_scenario(&fixtures::fixture(name).unwrap()).unwrap()
}

#[test]
fn committed_jerk_takes_effect_one_action_later() {
    let log = run("narrowing_coop");
    let mut checked = 0;
    for rec in &log.planner {
        let trace = log.trace(&rec.agent).unwrap();
        for row in trace.rows.iter().filter(|r| {
            r.source == ControlSource::Plan && r.t >= rec.t + 1.0 - 1e-9 && r.t < rec.t + 2.0 - 1e-9
        }) {
            assert_eq!(row.jerk, rec.committed_jerk, "{} at {}", rec.agent, row.t);
            checked += 1;
        }
    }
    assert!(checked > 1000);
    // Nothing is planned before the first boundary: the opening interval coasts.
    for trace in &log.agents {
        assert!(trace
            .rows
            .iter()
            .filter(|r| r.t < 1.0 - 1e-9)
            .all(|r| r.jerk == 0.0));
    }
}

#[test]
fn each_substep_has_exactly_one_control_source() {
    for name in fixtures::names() {
        let log = run(name);
        for trace in &log.agents {
            let ignorant = trace.controller == ControllerKind::Ignorant;
            for row in &trace.rows {
                match row.source {
                    ControlSource::Script => assert!(ignorant),
                    ControlSource::Plan => assert!(!ignorant),
                    ControlSource::Override => {
                        assert!(!ignorant);
                        assert_eq!(row.jerk, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn timestamps_increase_and_runs_are_complete() {
    for name in fixtures::names() {
        let log = run(name);
        for trace in &log.agents {
            assert!(trace.rows.windows(2).all(|w| w[1].t > w[0].t), "{name}");
            assert!((trace.rows.last().unwrap().t - log.end_time).abs() < 1e-9);
        }
        for rec in log.planner.iter().filter(|r| !r.routes.is_empty()) {
            assert!(rec.p_go > 0.0 && rec.p_go < 1.0);
            assert!(
                rec.routes.iter().all(|r| r.expected.is_some()),
                "{name} at {}",
                rec.t
            );
        }
        let diagram = PathTimeDiagram::from_log(&log);
        assert_eq!(
            PathTimeDiagram::from_csv(&diagram.to_csv())
                .unwrap()
                .to_csv(),
            diagram.to_csv()
        );
    }
}

#[test]
fn cooperative_agents_never_collide_in_fixtures() {
    for name in fixtures::names() {
        assert!(run(name).collisions.is_empty(), "{name}");
    }
}
