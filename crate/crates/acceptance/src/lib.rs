//! Shared helpers for the acceptance suite in `tests/acceptance.rs`.

use std::time::{Duration, Instant};

/// Two-sided z for a 99% interval.
pub const Z99: f64 = 2.575_829_303_548_901;

/// Wilson score interval for `successes` out of `n`.
pub fn wilson(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Result of one criterion.
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

/// Runs criteria in order, printing one line each.
#[derive(Default)]
pub struct Suite {
    failed: Vec<String>,
    total: usize,
}

impl Suite {
    /// `budget` is the allowed wall time; exceeding it fails the criterion.
    pub fn run(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Verdict) {
        self.total += 1;
        let start = Instant::now();
        let v = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::new(false, format!("panicked: {msg}"))
            });
        let took = start.elapsed();
        let in_time = took <= budget;
        let passed = v.passed && in_time;
        let timing = if in_time {
            format!("{:.2}s", took.as_secs_f64())
        } else {
            format!("{:.2}s, over the {}s budget", took.as_secs_f64(), budget.as_secs())
        };
        println!("{} {name}: {} ({timing})", if passed { "PASS" } else { "FAIL" }, v.detail);
        if !passed {
            self.failed.push(name.to_owned());
        }
    }

    /// Prints the tally and exits nonzero on any failure.
    pub fn finish(self) {
        println!("{} of {} criteria passed", self.total - self.failed.len(), self.total);
        if !self.failed.is_empty() {
            std::process::exit(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_brackets_the_estimate() {
        let (lo, hi) = wilson(90, 100, Z99);
        assert!(lo < 0.9 && 0.9 < hi);
        assert!((lo - 0.796249).abs() < 1e-6 && (hi - 0.953974).abs() < 1e-6, "{lo} {hi}");
        assert_eq!(wilson(0, 10, Z99).0, 0.0);
    }
}
