//! Monte Carlo experiments checking the asymptotic behaviour of the
//! estimator and of quadratic forms.
//!
//! Every replicate draws from its own seed stream, so a report depends only
//! on the plan, never on the number of worker threads.

mod consistency;
mod coupling;
mod normality;
pub mod plan;
pub mod report;
pub mod stats;
mod stein;
mod tail;
pub mod testfn;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::error::{Error, Result};
use crate::randsrc::SeedSpec;
use crate::remodel::{draw_independent, gen_design, ModelParams};
use crate::spectral::{decompose_gram, GramSpectrum};
use crate::vcest::{fit_mle, FitOptions, FitResult, ScoreState};

pub use plan::{
    CouplingKind, CouplingPlan, DesignKind, DesignPlan, ExperimentKind, ExperimentPlan, QKind, SteinOptions,
    TailOptions, MIN_REPLICATES,
};
pub use report::{CellRow, ExperimentReport, Gate, Summary, CONSTANTS_NOTE};
pub use testfn::{SmoothTestFn, TestFnKind, TestFnSpec};

/// A fixed-size worker pool; results always come back in index order.
pub struct Executor {
    pool: ThreadPool,
}

impl Executor {
    /// `workers = 0` picks the number of available cores.
    pub fn new(workers: usize) -> Result<Self> {
        let pool = ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?;
        Ok(Executor { pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..count).into_par_iter().map(f).collect())
    }

    /// Like [`map`](Self::map), stopping at the first error in index order.
    pub fn try_map<T, F>(&self, count: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.map(count, f).into_iter().collect()
    }
}

/// Fit settings used for every replicate: no trace, no plug-in covariance.
pub(crate) const REPLICATE_FIT: FitOptions =
    FitOptions { grid: 64, golden_tol: 1e-8, newton_max_iters: 20, t_cap: 1.0 - 1e-6, keep_trace: false, compute_psi: false };

/// One grid cell: the fixed design for a given n and its seed.
pub(crate) struct Cell {
    pub n: usize,
    pub x: DMatrix<f64>,
    pub spec: GramSpectrum,
    pub seed: SeedSpec,
}

impl Cell {
    pub fn build(plan: &ExperimentPlan, index: usize) -> Result<Self> {
        let n = plan.n_grid[index];
        let seed = plan.cell_seed(index);
        let p = plan.design.p_for(n);
        let x = gen_design(n, p, &plan.design.design_for(n), seed.child(0))?;
        let spec = decompose_gram(&x)?;
        Ok(Cell { n, x, spec, seed })
    }

    pub fn replicate_seed(&self, r: usize) -> SeedSpec {
        self.seed.child(r as u64 + 1)
    }

    pub fn fit_y(&self, y: &[f64]) -> Result<FitResult> {
        let state = ScoreState::new(&self.spec, y)?;
        fit_mle(&state, &REPLICATE_FIT)
    }

    pub fn fit_independent(&self, plan: &ExperimentPlan, r: usize) -> Result<FitResult> {
        let draw = draw_independent(&self.x, plan.params, plan.beta_law, plan.eps_law, self.replicate_seed(r))?;
        self.fit_y(&draw.y)
    }
}

/// Share of replicates that may fail identifiability before a cell aborts.
pub(crate) const MAX_FAILURE_SHARE: f64 = 0.01;

/// Keep successful fits. Statistical flags (including a flagged
/// identifiability) count as failures; any other error propagates.
pub(crate) fn collect_fits(n: usize, results: Vec<Result<FitResult>>) -> Result<(Vec<FitResult>, usize)> {
    let total = results.len();
    let mut fits = Vec::with_capacity(total);
    let mut failures = 0;
    for r in results {
        match r {
            Ok(f) if f.identifiability_flag => failures += 1,
            Ok(f) => fits.push(f),
            Err(e) if e.is_statistical_flag() => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if failures as f64 > MAX_FAILURE_SHARE * total as f64 {
        return Err(Error::NotIdentifiable(format!(
            "{failures} of {total} replicates failed at n = {n}; cell aborted"
        )));
    }
    Ok((fits, failures))
}

pub(crate) fn theta_error(fit: &FitResult, truth: &ModelParams) -> f64 {
    let ds = fit.theta_hat.sigma0_sq - truth.sigma0_sq;
    let de = fit.theta_hat.eta0_sq - truth.eta0_sq;
    (ds * ds + de * de).sqrt()
}

/// Run `plan` on `exec`. The report carries gate outcomes; a failed gate is
/// not an error.
pub fn run_experiment(plan: &ExperimentPlan, exec: &Executor) -> Result<ExperimentReport> {
    plan.validate()?;
    let report = match plan.kind {
        ExperimentKind::Consistency => consistency::run(plan, exec)?,
        ExperimentKind::TailEnvelope => tail::run(plan, exec)?,
        ExperimentKind::Normality => normality::run(plan, exec)?,
        ExperimentKind::Coupling => coupling::run(plan, exec)?,
        ExperimentKind::SteinDiscrepancy => stein::run(plan, exec)?,
    };
    Ok(report.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn executor_preserves_order() {
        let exec = Executor::new(3).unwrap();
        assert_eq!(exec.workers(), 3);
        let v = exec.map(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
        let err = exec.try_map(10, |i| if i == 4 { Err(Error::WidenGrid) } else { Ok(i) });
        assert!(matches!(err, Err(Error::WidenGrid)));
    }
}
