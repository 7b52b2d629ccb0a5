//! Built-in verification suites: gradients against finite differences,
//! sparse gating against its compute-all oracle, and retrieval metrics
//! against a brute-force definition.

mod gating;
mod gradients;
mod metric;

use std::fmt;

pub use gating::{gating_suite, straight_through_draws};
pub use gradients::{gradient_families, gradient_suite, GRAD_TOLERANCE};
pub use metric::{metric_suite, reference_average_precision, reference_metrics};

/// One named check inside a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub cases: usize,
    /// Largest error observed, in the check's own unit.
    pub worst: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.lines.is_empty() && self.lines.iter().all(|l| l.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckLine> {
        self.lines.iter().filter(|l| !l.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(
                f,
                "{} {}/{}: {} cases, worst {:.3e}",
                if l.passed { "PASS" } else { "FAIL" },
                self.suite,
                l.name,
                l.cases,
                l.worst
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;

    #[test]
    fn gradient_suite_passes_clean_and_catches_faults() {
        let r = gradient_suite(20, 0, None).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.lines.len(), gradient_families().count());
        for kind in [OpKind::Conv2d, OpKind::Triplet, OpKind::Softmax] {
            let bad = gradient_suite(2, 0, Some(kind)).unwrap();
            assert!(!bad.passed(), "{kind:?} fault went unnoticed");
        }
    }

    #[test]
    fn gating_suite_passes() {
        let r = gating_suite(0).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.lines.len(), 9);
    }

    #[test]
    fn metric_suite_passes() {
        let r = metric_suite(50, 0).unwrap();
        assert!(r.passed(), "{r}");
    }
}
