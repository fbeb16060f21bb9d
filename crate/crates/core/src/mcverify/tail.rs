//! Exceedance probabilities of the uniform deviation of `σ*²(η²)` from its
//! mean over `η² ∈ [0, R]`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::qform::{sup_deviation_projected, Projection, QFFamily};
use crate::remodel::draw_independent;

use super::report::{CellRow, ExperimentReport, Gate};
use super::stats::{mean_se, ols, wilson};
use super::{Cell, ExperimentPlan, Executor};

/// Cells with fewer exceedances than this are not used in the fits.
pub const MIN_EXCEEDANCES: usize = 5;
/// Required R² of the line through `log P̂` against n.
pub const MIN_R_SQUARED: f64 = 0.8;

pub(super) fn run(plan: &ExperimentPlan, exec: &Executor) -> Result<ExperimentReport> {
    let opts = plan.tail.as_ref().ok_or_else(|| Error::InvalidParameter("missing tail options".into()))?;
    let mut rep = ExperimentReport::new(plan)?;
    let reps = plan.replicates;
    let (s2, e2) = (plan.params.sigma0_sq, plan.params.eta0_sq);
    // counts[r][cell]
    let mut counts = vec![Vec::new(); opts.r_grid.len()];

    for index in 0..plan.n_grid.len() {
        let cell = Cell::build(plan, index)?;
        let n = cell.n;
        let nf = n as f64;
        let lambdas = cell.spec.lambdas().to_vec();
        let family = QFFamily::resolvent(DMatrix::identity(n, n), lambdas.clone(), opts.eta_max)?;
        let centre: Vec<f64> = lambdas.iter().map(|l| s2 * (e2 * l + 1.0) / nf).collect();
        let sups = exec.try_map(reps, |r| {
            let draw = draw_independent(&cell.x, plan.params, plan.beta_law, plan.eps_law, cell.replicate_seed(r))?;
            let y_check = cell.spec.rotate(&draw.y)?;
            let proj = Projection { s_sq: y_check.iter().map(|v| v * v / nf).collect(), col_norms_sq: centre.clone() };
            Ok(sup_deviation_projected(&family, &proj, opts.grid)?.0)
        })?;
        let (mean, se) = mean_se(&sups);
        rep.cells.push(CellRow::new(n, format!("R={},G={}", opts.eta_max, opts.grid), "mean_sup_deviation", mean).se(se));
        for (ri, &r) in opts.r_grid.iter().enumerate() {
            let k = sups.iter().filter(|&&v| v > r).count();
            let phat = k as f64 / reps as f64;
            let (lo, hi) = wilson(k, reps, 0.05);
            let mut row = CellRow::new(n, format!("r={r}"), "exceedance_probability", phat)
                .se((phat * (1.0 - phat) / reps as f64).sqrt())
                .ci(lo, hi);
            if k < MIN_EXCEEDANCES {
                row.gate = "unreliable".into();
            }
            rep.cells.push(row);
            counts[ri].push(k);
        }
    }

    if counts.iter().flatten().all(|&k| k == 0) {
        return Err(Error::WidenGrid);
    }

    let ns: Vec<f64> = plan.n_grid.iter().map(|&n| n as f64).collect();
    let mut evaluable = 0;
    for (ri, &r) in opts.r_grid.iter().enumerate() {
        let ks = &counts[ri];
        if ks.iter().any(|&k| k < MIN_EXCEEDANCES) {
            rep.flags.push(format!("r={r}: a cell has fewer than {MIN_EXCEEDANCES} exceedances; not evaluated"));
            continue;
        }
        evaluable += 1;
        let logp: Vec<f64> = ks.iter().map(|&k| (k as f64 / reps as f64).ln()).collect();
        let log_se: Vec<f64> = ks.iter().map(|&k| ((1.0 - k as f64 / reps as f64) / k as f64).sqrt()).collect();
        let decreasing = logp.windows(2).all(|w| w[1] < w[0]);
        let worst = logp.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        rep.gates.push(Gate::new(
            format!("tail_decreasing[r={r}]"),
            worst,
            None,
            "log exceedance probability strictly decreasing in n",
            decreasing,
        ));
        if ns.len() >= 2 {
            let fit = ols(&ns, &logp)?;
            rep.summary(format!("log_tail_slope[r={r}]"), fit.slope, Some(fit.propagated_se(&log_se)));
            rep.gates.push(Gate::new(
                format!("tail_linear[r={r}]"),
                fit.r_squared,
                None,
                format!("R² of log P̂ against n > {MIN_R_SQUARED}"),
                fit.r_squared > MIN_R_SQUARED,
            ));
        }
    }
    rep.summary("evaluable_thresholds", evaluable as f64, None);
    if evaluable == 0 {
        rep.gates.push(Gate::new(
            "threshold_evaluable",
            0.0,
            None,
            format!("at least one r with ≥ {MIN_EXCEEDANCES} exceedances in every cell"),
            false,
        ));
    }
    Ok(rep)
}
