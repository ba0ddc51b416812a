//! Shared-matrix versus factor-per-member timing.

use std::time::Instant;

use crate::error::Result;
use crate::mms::{run_mms, MmsConfig};
use crate::scheme::{Bootstrap, MatrixSharing, SchemeOptions};

/// Counters and wall-clock of one instrumented run.
#[derive(Clone, Debug, PartialEq)]
pub struct PathReport {
    pub seconds: f64,
    pub steps: usize,
    pub factorizations: usize,
    pub solves: usize,
    pub assemblies: usize,
    /// Factorizations of every step, bootstrap included.
    pub factorizations_per_step: Vec<usize>,
    pub assemblies_per_step: Vec<usize>,
    pub max_divergence_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerfReport {
    pub n: usize,
    pub members: usize,
    pub steps: usize,
    pub shared: PathReport,
    pub naive: PathReport,
}

impl PerfReport {
    pub fn speedup(&self) -> f64 {
        self.naive.seconds / self.shared.seconds
    }

    pub fn render(&self) -> String {
        let line = |name: &str, p: &PathReport| {
            format!(
                "{name}: {:.3} s, {} factorizations, {} assemblies, {} solves\n",
                p.seconds, p.factorizations, p.assemblies, p.solves
            )
        };
        format!(
            "unit_square({}), J={}, M={}\n{}{}speedup {:.2}\n",
            self.n,
            self.members,
            self.steps,
            line("shared", &self.shared),
            line("naive", &self.naive),
            self.speedup()
        )
    }
}

fn timed(cfg: &MmsConfig) -> Result<PathReport> {
    let start = Instant::now();
    let res = run_mms(cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let rec = &res.summary.records;
    Ok(PathReport {
        seconds,
        steps: rec.len(),
        factorizations: rec.iter().map(|r| r.counters.factorizations).sum(),
        solves: rec.iter().map(|r| r.counters.solves).sum(),
        assemblies: rec.iter().map(|r| r.matrix_assemblies).sum(),
        factorizations_per_step: rec.iter().map(|r| r.counters.factorizations).collect(),
        assemblies_per_step: rec.iter().map(|r| r.matrix_assemblies).collect(),
        max_divergence_ratio: res.summary.max_divergence_ratio(),
    })
}

/// Times the manufactured-solution run on `unit_square(n)` with `members`
/// members and `steps` steps, once with shared matrices and once naively.
/// Both runs are sequential and bootstrap with backward Euler, so every step
/// factors.
pub fn perf_report(n: usize, members: usize, steps: usize) -> Result<PerfReport> {
    let base = MmsConfig { n, steps, members, bootstrap: Bootstrap::BackwardEuler, ..Default::default() };
    let with = |sharing| MmsConfig { options: SchemeOptions { sharing, ..base.options.clone() }, ..base.clone() };
    // untimed warm-up so the first measured run does not pay for page faults
    run_mms(&MmsConfig { n: n.min(4), steps: 2, ..with(MatrixSharing::Shared) })?;
    let shared = timed(&with(MatrixSharing::Shared))?;
    let naive = timed(&with(MatrixSharing::Naive))?;
    Ok(PerfReport { n, members, steps, shared, naive })
}
