//! Verification suites shared by the command line and the integration tests:
//! finite-difference gradient checks and brute-force oracle comparisons.

pub mod claims;
pub mod grad;
pub mod oracle;

pub use grad::{gradient_suites, GRAD_TOLERANCE};
pub use oracle::oracle_suites;

/// Outcome of one verification case.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub case: String,
    pub passed: bool,
    /// Worst relative error for gradient checks, mismatch count for oracles.
    pub metric: f64,
    pub detail: String,
}

impl Check {
    pub fn render(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!("{status} {:<20} {}: {}", self.suite, self.case, self.detail)
    }
}

/// Distinct suite names in first-seen order with their pass state.
pub fn suite_summary(checks: &[Check]) -> Vec<(&'static str, bool, usize)> {
    let mut out: Vec<(&'static str, bool, usize)> = Vec::new();
    for c in checks {
        match out.iter_mut().find(|(s, _, _)| *s == c.suite) {
            Some(entry) => {
                entry.1 &= c.passed;
                entry.2 += 1;
            }
            None => out.push((c.suite, c.passed, 1)),
        }
    }
    out
}

pub fn all_passed(checks: &[Check]) -> bool {
    !checks.is_empty() && checks.iter().all(|c| c.passed)
}
