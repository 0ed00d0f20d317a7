use std::path::Path;
use std::process::{Command, Output};

use coplan::sim::{fixtures, run_scenario, PathTimeDiagram};

fn coplan(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_coplan"));
    cmd.args(args).env_remove("COPLAN_OUT_DIR");
    if let Some(dir) = out_dir {
        cmd.env("COPLAN_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn run_cooperative_narrowing_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = coplan(&["run", "narrowing_coop"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(
        files_in(dir.path()),
        [
            "narrowing_coop.csv",
            "narrowing_coop.diagram.csv",
            "narrowing_coop.events.json"
        ]
    );
    assert!(stdout(&out).contains("termination: goal-reached"));
}

#[test]
fn run_both_formats_and_diagram_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = coplan(
        &[
            "run",
            "narrowing_ignorant",
            "--out-dir",
            d,
            "--format",
            "both",
            "--seed",
            "3",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let svg = std::fs::read_to_string(dir.path().join("narrowing_ignorant.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    let written =
        std::fs::read_to_string(dir.path().join("narrowing_ignorant.diagram.csv")).unwrap();
    let mut spec = fixtures::fixture("narrowing_ignorant").unwrap();
    spec.sim.seed = 3;
    let log = run_scenario(&spec).unwrap();
    let regenerated = PathTimeDiagram::from_log(&log);
    assert_eq!(regenerated.to_csv(), written);
    assert_eq!(
        PathTimeDiagram::from_csv(&written).unwrap().to_csv(),
        written
    );
    let csv = std::fs::read_to_string(dir.path().join("narrowing_ignorant.csv")).unwrap();
    assert_eq!(csv, log.to_csv());
}

#[test]
fn run_classical_narrowing_reports_deadlock() {
    let dir = tempfile::tempdir().unwrap();
    let out = coplan(&["run", "narrowing_classical"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("narrowing_classical.diagram.csv")).unwrap();
    let diagram = PathTimeDiagram::from_csv(&text).unwrap();
    for series in &diagram.series {
        let band = diagram
            .bands
            .iter()
            .find(|b| b.agent == series.agent)
            .unwrap();
        let (t_end, s_end) = *series.points.last().unwrap();
        assert!(s_end < band.s_in, "{} ends inside the zone", series.agent);
        // Flat over the last five seconds.
        let earlier = series.points.iter().find(|p| p.0 >= t_end - 5.0).unwrap();
        assert!(s_end - earlier.1 < 0.5);
    }
}

#[test]
fn malformed_probabilities_name_the_routes_section() {
    let dir = tempfile::tempdir().unwrap();
    let text = fixtures::source("intersection_p99_straight")
        .unwrap()
        .replace("probability = 0.01", "probability = -0.09");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out = coplan(&["run", path.to_str().unwrap()], Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("routes: probabilities sum to 0.9"),
        "{}",
        stderr(&out)
    );
    assert_eq!(files_in(dir.path()), ["bad.toml"]);
}

#[test]
fn syntax_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "name = \"x\"\n[sim]\nend_time = = 3\n").unwrap();
    let out = coplan(&["check", path.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn check_narrowing_is_unambiguous() {
    let out = coplan(&["check", "narrowing_coop"], None);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("unambiguous: ego-first"), "{text}");
    assert!(
        text.contains("route default (p = 1.000000): 1 zone(s)"),
        "{text}"
    );
    assert!(text.contains("horizon (ego): 12.000000 s"), "{text}");
}

#[test]
fn check_symmetric_narrowing_is_ambiguous() {
    let out = coplan(&["check", "narrowing_classical"], None);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(
        stdout(&out).lines().any(|l| l == "ambiguous"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn check_missing_path_names_the_agent() {
    let dir = tempfile::tempdir().unwrap();
    let text = fixtures::source("narrowing_coop")
        .unwrap()
        .replace("path = \"westbound\"", "path = \"northbound\"");
    let path = dir.path().join("missing.toml");
    std::fs::write(&path, text).unwrap();
    let out = coplan(&["check", path.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.contains("agents[1].path") && err.contains("'other'"),
        "{err}"
    );
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let out = coplan(&["check", "no_such_fixture"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("narrowing_coop"));
}

fn sweep_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn sweep_route_probability_shows_the_surprise() {
    let out = coplan(
        &[
            "sweep",
            "intersection_p99_straight",
            "--param",
            "route_probability:straight",
            "--values",
            "0.01,0.99",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text
        .starts_with("value,termination,max_decel,braking_onset,clearance,deadlock,overrides\n"));
    let rows = sweep_rows(&text);
    assert_eq!(rows.len(), 2);
    let decel = |r: &Vec<String>| r[2].parse::<f64>().unwrap();
    assert!(decel(&rows[0]) > decel(&rows[1]), "{text}");
}

#[test]
fn sweep_single_value_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = coplan(&["run", "narrowing_coop", "--seed", "9"], Some(dir.path()));
    let sweep = coplan(
        &[
            "sweep",
            "narrowing_coop",
            "--param",
            "seed",
            "--values",
            "9",
        ],
        None,
    );
    assert_eq!(sweep.status.code(), Some(0), "{}", stderr(&sweep));
    let rows = sweep_rows(&stdout(&sweep));
    assert_eq!(rows.len(), 1);
    assert!(stdout(&run).contains(&format!("termination: {}", rows[0][1])));
}

#[test]
fn sweep_rejects_empty_values_and_unknown_parameters() {
    let out = coplan(&["sweep", "narrowing_coop", "--param", "seed"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = coplan(
        &[
            "sweep",
            "narrowing_coop",
            "--param",
            "gravity",
            "--values",
            "1",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("not addressable"));
}
