//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `DFG_ACCEPTANCE=1,2,8` runs a subset. The process exits non-zero when
//! any selected criterion fails.

mod closed_form;
mod experiments;
mod gradcheck;
mod schedule;
mod shapes;
mod weights;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

pub type Check = Result<String, Box<dyn std::error::Error + Send + Sync>>;

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Check,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        name: "gradient checks",
        run: gradcheck::run,
    },
    Criterion {
        id: 2,
        name: "layer shapes",
        run: shapes::run,
    },
    Criterion {
        id: 3,
        name: "attention math",
        run: weights::run,
    },
    Criterion {
        id: 4,
        name: "update schedule",
        run: schedule::run,
    },
    Criterion {
        id: 5,
        name: "synthetic imbalance",
        run: experiments::synthetic,
    },
    Criterion {
        id: 6,
        name: "fashion-mnist desk scale",
        run: experiments::fashion,
    },
    Criterion {
        id: 7,
        name: "determinism",
        run: experiments::determinism,
    },
    Criterion {
        id: 8,
        name: "gradient penalty closed form",
        run: closed_form::penalty,
    },
    Criterion {
        id: 9,
        name: "pca oracle",
        run: closed_form::pca,
    },
];

/// Criteria that currently fail at desk scale. They still print FAIL; the
/// process only exits non-zero for other failures, or if one of these
/// starts passing so the list gets updated.
const EXPECTED_FAILURES: &[u32] = &[5];

fn selected() -> Option<Vec<u32>> {
    let v = std::env::var("DFG_ACCEPTANCE").ok()?;
    Some(v.split(',').filter_map(|t| t.trim().parse().ok()).collect())
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .is_test(true)
        .try_init();
    let only = selected();
    let mut failed = Vec::new();
    let mut unexpected_pass = Vec::new();
    for c in CRITERIA {
        if only.as_ref().is_some_and(|ids| !ids.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg.into())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                println!("PASS criterion {} ({}): {detail} [{secs:.1}s]", c.id, c.name);
                if EXPECTED_FAILURES.contains(&c.id) {
                    unexpected_pass.push(c.id);
                }
            }
            Err(e) if EXPECTED_FAILURES.contains(&c.id) => {
                println!("FAIL criterion {} ({}): {e} [{secs:.1}s] (expected failure)", c.id, c.name);
            }
            Err(e) => {
                println!("FAIL criterion {} ({}): {e} [{secs:.1}s]", c.id, c.name);
                failed.push(c.id);
            }
        }
    }
    if !unexpected_pass.is_empty() {
        println!("passing criteria listed as expected failures: {unexpected_pass:?}");
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
    }
    if !failed.is_empty() || !unexpected_pass.is_empty() {
        std::process::exit(1);
    }
}
