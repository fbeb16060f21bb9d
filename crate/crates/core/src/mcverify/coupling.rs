//! Estimation error when `y` is generated from effects coupled to an
//! independent draw, compared with the independent case.

use crate::error::{Error, Result};
use crate::remodel::{draw_coupled, draw_independent, CouplingScheme};
use crate::vcest::FitResult;

use super::plan::CouplingKind;
use super::report::{CellRow, ExperimentReport, Gate};
use super::stats::median_se;
use super::{theta_error, Cell, ExperimentPlan, Executor, MAX_FAILURE_SHARE};

/// Allowed ratio between coupled and independent median errors.
pub const RATIO_WINDOW: (f64, f64) = (0.5, 2.0);

struct Replicate {
    independent: FitResult,
    /// One `(fit, ‖β̃ − β‖)` per scheme.
    coupled: Vec<(FitResult, f64)>,
}

fn schemes(plan: &ExperimentPlan, n: usize) -> Result<Vec<(String, CouplingScheme)>> {
    let c = plan.coupling.as_ref().ok_or_else(|| Error::InvalidParameter("missing coupling options".into()))?;
    Ok(match c.scheme {
        CouplingKind::Additive => c
            .delta_scales
            .iter()
            .map(|&s| {
                let delta = s * (n as f64).powf(-c.delta_power);
                (format!("scale={s}"), CouplingScheme::AdditivePerturb { delta })
            })
            .collect(),
        CouplingKind::SparseZero => {
            vec![(format!("fraction={}", c.fraction), CouplingScheme::SparseZero { fraction: c.fraction })]
        }
    })
}

pub(super) fn run(plan: &ExperimentPlan, exec: &Executor) -> Result<ExperimentReport> {
    let kind = plan.coupling.as_ref().map(|c| c.scheme).unwrap_or(CouplingKind::Additive);
    let mut rep = ExperimentReport::new(plan)?;
    let mut bitwise_ok = true;
    let mut has_zero = false;
    let mut all_finite = true;
    let mut last_ratios = Vec::new();

    for index in 0..plan.n_grid.len() {
        let cell = Cell::build(plan, index)?;
        let n = cell.n;
        let schemes = schemes(plan, n)?;
        let results = exec.map(plan.replicates, |r| -> Result<Replicate> {
            let seed = cell.replicate_seed(r);
            let ind = draw_independent(&cell.x, plan.params, plan.beta_law, plan.eps_law, seed)?;
            let independent = cell.fit_y(&ind.y)?;
            let mut coupled = Vec::with_capacity(schemes.len());
            for (_, scheme) in &schemes {
                let draw = draw_coupled(&cell.x, plan.params, plan.beta_law, plan.eps_law, *scheme, seed)?;
                let dist = draw.coupling.as_ref().map_or(0.0, |c| c.coupling_distance);
                coupled.push((cell.fit_y(&draw.y)?, dist));
            }
            Ok(Replicate { independent, coupled })
        });
        let mut reps = Vec::with_capacity(results.len());
        let mut failures = 0usize;
        for r in results {
            match r {
                Ok(r) => reps.push(r),
                Err(e) if e.is_statistical_flag() => failures += 1,
                Err(e) => return Err(e),
            }
        }
        if failures as f64 > MAX_FAILURE_SHARE * plan.replicates as f64 {
            return Err(Error::NotIdentifiable(format!("{failures} replicates failed at n = {n}; cell aborted")));
        }

        let ind_err: Vec<f64> = reps.iter().map(|r| theta_error(&r.independent, &plan.params)).collect();
        let (ind_med, ind_se) = median_se(&ind_err);
        rep.cells.push(CellRow::new(n, "independent", "median_error", ind_med).se(ind_se));
        let last = index + 1 == plan.n_grid.len();
        let mut trend = vec![ind_med];
        for (si, (label, scheme)) in schemes.iter().enumerate() {
            let errs: Vec<f64> = reps.iter().map(|r| theta_error(&r.coupled[si].0, &plan.params)).collect();
            let dists: Vec<f64> = reps.iter().map(|r| r.coupled[si].1).collect();
            all_finite &= errs.iter().all(|e| e.is_finite());
            let (med, se) = median_se(&errs);
            let (dmed, dse) = median_se(&dists);
            let params = match scheme {
                CouplingScheme::AdditivePerturb { delta } => format!("{label},delta={delta}"),
                _ => label.clone(),
            };
            rep.cells.push(CellRow::new(n, &params, "median_error", med).se(se));
            rep.cells.push(CellRow::new(n, &params, "median_coupling_distance", dmed).se(dse));
            let ratio = med / ind_med;
            let ratio_se = ratio * ((se / med).powi(2) + (ind_se / ind_med).powi(2)).sqrt();
            rep.cells.push(CellRow::new(n, &params, "error_ratio", ratio).se(ratio_se));
            trend.push(med);
            if let CouplingScheme::AdditivePerturb { delta } = scheme {
                if *delta == 0.0 {
                    has_zero = true;
                    bitwise_ok &= reps.iter().all(|r| same_bits(&r.coupled[si].0, &r.independent));
                }
            }
            if last {
                last_ratios.push((label.clone(), ratio, ratio_se));
            }
        }
        if kind == CouplingKind::Additive {
            let nondecreasing = trend.windows(2).all(|w| w[1] >= w[0]);
            rep.summary(format!("nondecreasing_in_delta[n={n}]"), if nondecreasing { 1.0 } else { 0.0 }, None);
        }
    }

    match kind {
        CouplingKind::Additive => {
            if has_zero {
                rep.gates.push(Gate::new(
                    "delta_zero_bitwise",
                    if bitwise_ok { 1.0 } else { 0.0 },
                    None,
                    "δ = 0 reproduces the independent estimate bit for bit",
                    bitwise_ok,
                ));
            }
            let (lo, hi) = RATIO_WINDOW;
            for (label, ratio, se) in last_ratios {
                rep.gates.push(Gate::new(
                    format!("error_ratio_at_largest_n[{label}]"),
                    ratio,
                    Some(se),
                    format!("coupled/independent median error in [{lo}, {hi}]"),
                    (lo..=hi).contains(&ratio),
                ));
            }
        }
        CouplingKind::SparseZero => {
            rep.gates.push(Gate::new(
                "sparse_zero_finite",
                if all_finite { 1.0 } else { 0.0 },
                None,
                "all estimates finite",
                all_finite,
            ));
        }
    }
    Ok(rep)
}

fn same_bits(a: &FitResult, b: &FitResult) -> bool {
    a.theta_hat.sigma0_sq.to_bits() == b.theta_hat.sigma0_sq.to_bits()
        && a.theta_hat.eta0_sq.to_bits() == b.theta_hat.eta0_sq.to_bits()
}
