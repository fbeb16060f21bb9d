//! Distance of `√n(θ̂ − θ₀)` from its Gaussian limit, tested through a
//! smooth function and Wald-ellipse coverage.

use nalgebra::DMatrix;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::vcest::{asymptotic_cov, EffectLaws};

use super::report::{CellRow, ExperimentReport, Gate};
use super::stats::{gaussian_expectation, mean_se};
use super::testfn::SmoothTestFn;
use super::{collect_fits, Cell, ExperimentPlan, Executor};

pub const COVERAGE_LEVEL: f64 = 0.95;
/// Accepted range for the empirical Wald coverage at the largest n.
pub const COVERAGE_WINDOW: (f64, f64) = (0.92, 0.975);
const QUADRATURE_TOL: f64 = 1e-10;

/// `E f(Z)`, `Z ~ N(0, Ψ)`, using only the coordinates f depends on.
fn surrogate(f: &SmoothTestFn, psi: &DMatrix<f64>) -> Result<f64> {
    let support = f.support();
    if support.is_empty() {
        return Ok(f.eval(&[]));
    }
    let sub = DMatrix::from_fn(support.len(), support.len(), |i, j| psi[(support[i], support[j])]);
    Ok(gaussian_expectation(|v| f.eval_on_support(v), &sub, QUADRATURE_TOL)?.0)
}

pub(super) fn run(plan: &ExperimentPlan, exec: &Executor) -> Result<ExperimentReport> {
    let spec = plan.test_function.clone().ok_or_else(|| Error::InvalidParameter("missing test function".into()))?;
    let f = SmoothTestFn::new(spec)?;
    let laws = EffectLaws { beta: plan.beta_law.moments(), eps: plan.eps_law.moments() };
    let chi2 = ChiSquared::new(2.0).expect("two degrees of freedom").inverse_cdf(COVERAGE_LEVEL);
    let truth = plan.params.as_array();
    let mut rep = ExperimentReport::new(plan)?;
    let mut discrepancies = Vec::new();
    let mut last_coverage = None;

    for index in 0..plan.n_grid.len() {
        let cell = Cell::build(plan, index)?;
        let n = cell.n;
        let psi = asymptotic_cov(&plan.params, &cell.spec, Some(&cell.x), &laws)?;
        let psi_inv = psi
            .try_inverse()
            .ok_or_else(|| Error::Singular(format!("asymptotic covariance at n = {n}")))?;
        let psi_dyn = DMatrix::from_fn(2, 2, |i, j| psi[(i, j)]);
        let target = surrogate(&f, &psi_dyn)?;

        let results = exec.map(plan.replicates, |r| cell.fit_independent(plan, r));
        let (fits, _) = collect_fits(n, results)?;
        let root_n = (n as f64).sqrt();
        let radius = plan.params.sigma0_sq * (n as f64).ln() / (2.0 * root_n);
        let mut fvals = Vec::with_capacity(fits.len());
        let mut inside = 0usize;
        let mut far = 0usize;
        for fit in &fits {
            let d = [fit.theta_hat.sigma0_sq - truth[0], fit.theta_hat.eta0_sq - truth[1]];
            let z = [root_n * d[0], root_n * d[1]];
            fvals.push(f.eval(&z));
            let q = z[0] * (psi_inv[(0, 0)] * z[0] + psi_inv[(0, 1)] * z[1])
                + z[1] * (psi_inv[(1, 0)] * z[0] + psi_inv[(1, 1)] * z[1]);
            if q <= chi2 {
                inside += 1;
            }
            if (d[0] * d[0] + d[1] * d[1]).sqrt() > radius {
                far += 1;
            }
        }
        let m = fits.len() as f64;
        let (mean_f, se_f) = mean_se(&fvals);
        let disc = (mean_f - target).abs();
        let coverage = inside as f64 / m;
        let far_share = far as f64 / m;
        let label = format!("f={}", f.name);
        rep.cells.push(CellRow::new(n, &label, "surrogate", target));
        rep.cells.push(CellRow::new(n, &label, "discrepancy", disc).se(se_f));
        rep.cells.push(
            CellRow::new(n, format!("level={COVERAGE_LEVEL}"), "wald_coverage", coverage)
                .se((coverage * (1.0 - coverage) / m).sqrt()),
        );
        rep.cells.push(
            CellRow::new(n, format!("radius={radius}"), "far_share", far_share)
                .se((far_share * (1.0 - far_share) / m).sqrt()),
        );
        rep.cells.push(CellRow::new(n, "", "psi_11", psi[(0, 0)]));
        rep.cells.push(CellRow::new(n, "", "psi_12", psi[(0, 1)]));
        rep.cells.push(CellRow::new(n, "", "psi_22", psi[(1, 1)]));
        let boundary = fits.iter().filter(|f| f.boundary_flag).count() as f64 / m;
        rep.cells.push(CellRow::new(n, "", "boundary_share", boundary).se((boundary * (1.0 - boundary) / m).sqrt()));
        discrepancies.push((disc, se_f));
        last_coverage = Some((coverage, (coverage * (1.0 - coverage) / m).sqrt()));
    }

    if let (Some(first), Some(last)) = (discrepancies.first(), discrepancies.last()) {
        if discrepancies.len() >= 2 {
            let se = (first.1 * first.1 + last.1 * last.1).sqrt();
            rep.gates.push(Gate::separated("discrepancy_decreases", first.0 - last.0, se));
        }
    }
    if let Some((cov, se)) = last_coverage {
        let (lo, hi) = COVERAGE_WINDOW;
        rep.gates.push(Gate::new(
            "wald_coverage",
            cov,
            Some(se),
            format!("coverage at the largest n in [{lo}, {hi}]"),
            (lo..=hi).contains(&cov),
        ));
    }
    Ok(rep)
}
