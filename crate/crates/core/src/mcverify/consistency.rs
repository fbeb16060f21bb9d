//! Median estimation error across n and its log-log slope.

use crate::error::{Error, Result};
use crate::vcest::is_identifiable;

use super::report::{CellRow, ExperimentReport, Gate};
use super::stats::{median_se, ols};
use super::{collect_fits, theta_error, Cell, ExperimentPlan, Executor};

/// Window for the log-log slope of the median error.
pub const SLOPE_WINDOW: (f64, f64) = (-0.7, -0.3);

pub(super) fn run(plan: &ExperimentPlan, exec: &Executor) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(plan)?;
    let mut log_n = Vec::new();
    let mut log_med = Vec::new();
    let mut log_se = Vec::new();
    let mut medians = Vec::new();
    for index in 0..plan.n_grid.len() {
        let cell = Cell::build(plan, index)?;
        let n = cell.n;
        if !is_identifiable(&cell.spec) {
            return Err(Error::NotIdentifiable(format!("design spectrum at n = {n} is flat")));
        }
        let results = exec.map(plan.replicates, |r| cell.fit_independent(plan, r));
        let (fits, failures) = collect_fits(n, results)?;
        let errors: Vec<f64> = fits.iter().map(|f| theta_error(f, &plan.params)).collect();
        let boundary = fits.iter().filter(|f| f.boundary_flag).count() as f64 / fits.len() as f64;
        let (med, se) = median_se(&errors);
        let label = format!("p={}", cell.spec.p());
        rep.cells.push(CellRow::new(n, &label, "median_error", med).se(se));
        let m = fits.len() as f64;
        rep.cells.push(CellRow::new(n, &label, "boundary_share", boundary).se((boundary * (1.0 - boundary) / m).sqrt()));
        rep.cells.push(CellRow::new(n, &label, "failures", failures as f64));
        log_n.push((n as f64).ln());
        log_med.push(med.ln());
        log_se.push(se / med);
        medians.push((med, se));
    }

    let fit = ols(&log_n, &log_med)?;
    let mc_se = fit.propagated_se(&log_se);
    rep.summary("slope", fit.slope, Some(mc_se));
    rep.summary("slope_se_residual", fit.slope_se, None);
    rep.summary("slope_ci_lo", fit.slope_ci.0, None);
    rep.summary("slope_ci_hi", fit.slope_ci.1, None);
    rep.summary("r_squared", fit.r_squared, None);

    let (lo, hi) = SLOPE_WINDOW;
    rep.gates.push(Gate::band_in_range("slope_in_window", fit.slope, mc_se, lo, hi));
    rep.gates.push(Gate::new(
        "slope_point_in_window",
        fit.slope,
        Some(mc_se),
        format!("slope in [{lo}, {hi}]"),
        (lo..=hi).contains(&fit.slope),
    ));
    let decreasing = medians.windows(2).all(|w| w[1].0 < w[0].0);
    let worst_step = medians.windows(2).map(|w| w[1].0 - w[0].0).fold(f64::NEG_INFINITY, f64::max);
    rep.gates.push(Gate::new(
        "medians_decreasing",
        worst_step,
        None,
        "median error strictly decreasing in n",
        decreasing,
    ));
    Ok(rep)
}
