//! Seeded property suites run by `exms check`. Each check reports an
//! observed error against a tolerance; errors raised while running a check
//! count as failures with an infinite observed value.

mod attention;
mod data;
mod gradients;
mod losses;
mod rope;

use serde::Serialize;

use crate::error::CliError;

pub const SUITES: [&str; 5] = ["gradients", "attention", "rope", "losses", "data"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.observed <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}/{} observed {:.3e} tolerance {:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.observed,
            self.tolerance
        )
    }
}

pub(crate) struct Recorder {
    suite: &'static str,
    outcomes: Vec<CheckOutcome>,
}

impl Recorder {
    fn new(suite: &'static str) -> Self {
        Self { suite, outcomes: Vec::new() }
    }

    fn record(&mut self, name: impl Into<String>, tolerance: f64, observed: Result<f64, CliError>) {
        let name = name.into();
        let observed = observed.unwrap_or_else(|e| {
            log::warn!("{}/{name}: {}", self.suite, e.report());
            f64::INFINITY
        });
        self.outcomes.push(CheckOutcome { suite: self.suite, name, observed, tolerance });
    }

    fn finish(self) -> Vec<CheckOutcome> {
        self.outcomes
    }
}

/// Largest elementwise absolute difference; infinite on a length mismatch.
pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Expands `all` and validates suite names.
pub fn resolve(name: &str) -> Result<Vec<&'static str>, CliError> {
    if name == "all" {
        return Ok(SUITES.to_vec());
    }
    SUITES
        .iter()
        .find(|s| **s == name)
        .map(|s| vec![*s])
        .ok_or_else(|| CliError::UnknownSuite(name.to_string()))
}

pub fn run_suite(name: &str) -> Result<Vec<CheckOutcome>, CliError> {
    let mut out = Vec::new();
    for suite in resolve(name)? {
        out.extend(match suite {
            "gradients" => gradients::run(),
            "attention" => attention::run(),
            "rope" => rope::run(),
            "losses" => losses::run(),
            "data" => data::run(),
            _ => unreachable!("resolve returns known suites"),
        });
    }
    Ok(out)
}

/// Runs the suites, printing one line per check; fails with
/// [`CliError::CheckFailed`] if any check fails.
pub fn cmd_check(name: &str) -> Result<Vec<CheckOutcome>, CliError> {
    let outcomes = run_suite(name)?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        return Err(CliError::CheckFailed { failed, total: outcomes.len() });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names() {
        assert_eq!(resolve("all").unwrap().len(), 5);
        assert_eq!(resolve("rope").unwrap(), vec!["rope"]);
        assert!(matches!(resolve("nope"), Err(CliError::UnknownSuite(_))));
    }

    #[test]
    fn nan_fails() {
        let o = CheckOutcome { suite: "x", name: "y".into(), observed: f64::NAN, tolerance: 1.0 };
        assert!(!o.passed());
        assert!(o.line().starts_with("FAIL"));
    }
}
