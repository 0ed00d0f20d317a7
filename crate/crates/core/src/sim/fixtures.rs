//! Scenario files shipped with the crate.

use crate::{Error, Result};

use super::scenario::{parse_scenario, ScenarioSpec};

/// Fixture names and their TOML sources.
pub const FIXTURES: [(&str, &str); 5] = [
    (
        "narrowing_coop",
        include_str!("../../scenarios/narrowing_coop.toml"),
    ),
    (
        "narrowing_classical",
        include_str!("../../scenarios/narrowing_classical.toml"),
    ),
    (
        "narrowing_ignorant",
        include_str!("../../scenarios/narrowing_ignorant.toml"),
    ),
    (
        "intersection_p99_straight",
        include_str!("../../scenarios/intersection_p99_straight.toml"),
    ),
    (
        "intersection_p99_turn",
        include_str!("../../scenarios/intersection_p99_turn.toml"),
    ),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    FIXTURES.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Option<&'static str> {
    FIXTURES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn fixture(name: &str) -> Result<ScenarioSpec> {
    let text = source(name).ok_or_else(|| Error::invalid(format!("unknown fixture '{name}'")))?;
    parse_scenario(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::World;

    #[test]
    fn every_fixture_builds() {
        for name in names() {
            let spec = fixture(name).unwrap();
            assert_eq!(spec.name, name);
            let world = World::build(&spec).unwrap();
            assert!(!world.zones.is_empty(), "{name}");
        }
    }

    #[test]
    fn unknown_fixture_is_rejected() {
        assert!(fixture("nowhere").is_err());
    }
}
