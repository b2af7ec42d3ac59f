use std::io::Write;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{aggregate, Aggregate};
use crate::error::{DfgError, Result};

/// One grid point of a blend-weight sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub accuracy: Aggregate,
    /// Per-seed accuracies, in seed order.
    pub runs: Vec<f64>,
}

/// Runs `run(rho, seed)` for every grid point and seed, on up to `jobs`
/// threads, and aggregates accuracy per `rho`. Results do not depend on
/// `jobs`.
pub fn sweep_rho<F>(grid: &[f64], seeds: &[u64], jobs: usize, run: F) -> Result<Vec<SweepRow>>
where
    F: Fn(f64, u64) -> Result<f64> + Sync,
{
    if let Some(r) = grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(DfgError::Config(format!("rho grid value {r} outside [0, 1]")));
    }
    if grid.is_empty() || seeds.is_empty() {
        return Err(DfgError::Config("sweep needs at least one rho and one seed".into()));
    }
    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..seeds.len()).map(move |s| (g, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("task counter");
                    if *n >= tasks.len() {
                        break;
                    }
                    *n += 1;
                    *n - 1
                };
                let (g, s) = tasks[i];
                let out = run(grid[g], seeds[s]);
                results.lock().expect("result table")[i] = Some(out);
            });
        }
    });
    let results = results.into_inner().expect("result table");
    let mut rows = Vec::with_capacity(grid.len());
    let mut it = results.into_iter();
    for &rho in grid {
        let runs = (0..seeds.len())
            .map(|_| it.next().flatten().expect("every task ran"))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(SweepRow {
            rho,
            accuracy: aggregate(&runs)?,
            runs,
        });
    }
    Ok(rows)
}

/// `sweep.csv`: `rho,mean_accuracy,std_accuracy,runs`.
pub fn write_sweep<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| DfgError::Io(e.into());
    w.write_record(["rho", "mean_accuracy", "std_accuracy", "runs"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.rho.to_string(),
            r.accuracy.mean.to_string(),
            r.accuracy.std.to_string(),
            r.accuracy.k.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
