//! Criterion runner and reference values for the acceptance suite.

use std::panic::{catch_unwind, AssertUnwindSafe};

/// Tracking errors per controller under a 10 rad/s sinusoid, in the order
/// listed as reference values: first column labeled L2, second L∞.
pub const REFERENCE_TRACKING: [(&str, f64, f64); 4] =
    [("SOSRE", 0.099, 0.069), ("PID", 0.171, 0.123), ("FORE", 0.368, 0.105), ("SORE", 1.214, 0.672)];

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

pub fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Runs criteria one at a time, printing one PASS/FAIL line each. A panic
/// counts as a failure.
#[derive(Default)]
pub struct Runner {
    results: Vec<(String, bool)>,
}

impl Runner {
    pub fn run(&mut self, name: &str, f: impl FnOnce() -> Verdict) {
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        self.results.push((name.to_string(), v.pass));
    }

    pub fn failed(&self) -> Vec<&str> {
        self.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect()
    }

    /// Prints the summary and exits non-zero if anything failed.
    pub fn finish(self) {
        let failed = self.failed();
        println!("\nacceptance: {} passed, {} failed", self.results.len() - failed.len(), failed.len());
        for name in &failed {
            println!("  failed: {name}");
        }
        if !failed.is_empty() {
            std::process::exit(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_are_failures() {
        let mut r = Runner::default();
        r.run("ok", || verdict(true, ""));
        r.run("boom", || panic!("nope"));
        assert_eq!(r.failed(), vec!["boom"]);
    }
}
