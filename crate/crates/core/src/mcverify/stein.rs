//! Discrepancy between `E f(w)` for centred quadratic forms and the matching
//! Gaussian surrogate, across the dimension d.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::qform::{build_w, napprox_rate, sigma_k_sq, CoordMoments, FNorms, QuadraticForm};
use crate::remodel::haar_frame;

use super::plan::QKind;
use super::report::{CellRow, ExperimentReport, Gate};
use super::stats::{gaussian_expectation, mean_se};
use super::testfn::SmoothTestFn;
use super::{ExperimentPlan, Executor};

const QUADRATURE_TOL: f64 = 1e-10;
/// Replicates drawn to confirm that a degenerate w vanishes.
const DEGENERATE_PROBES: usize = 100;

fn build_forms(plan: &ExperimentPlan, index: usize) -> Result<Vec<QuadraticForm>> {
    let opts = plan.stein.as_ref().ok_or_else(|| Error::InvalidParameter("missing stein options".into()))?;
    let d = plan.n_grid[index];
    let scale = 1.0 / (d as f64).sqrt();
    let frames = plan.cell_seed(index).child(0);
    (0..opts.k)
        .map(|k| match opts.q_kind {
            QKind::Identity => QuadraticForm::new(DMatrix::identity(d, d) * scale),
            QKind::Equispaced => {
                let step = if d > 1 { (opts.s_hi - opts.s_lo) / (d - 1) as f64 } else { 0.0 };
                let s = DVector::from_fn(d, |i, _| (opts.s_hi - step * i as f64) * scale);
                let o = haar_frame(d, d, frames.child(k as u64));
                let mut os = o.clone();
                for (j, sj) in s.iter().enumerate() {
                    os.column_mut(j).scale_mut(*sj);
                }
                QuadraticForm::new(os * o.transpose())
            }
        })
        .collect()
}

pub(super) fn run(plan: &ExperimentPlan, exec: &Executor) -> Result<ExperimentReport> {
    let opts = plan.stein.as_ref().ok_or_else(|| Error::InvalidParameter("missing stein options".into()))?;
    let spec = plan.test_function.clone().ok_or_else(|| Error::InvalidParameter("missing test function".into()))?;
    let f = SmoothTestFn::new(spec)?;
    let law = opts.law;
    let moments = CoordMoments::from(law.moments());
    let norms = FNorms { f2: f.norms[2], f3: f.norms[3] };
    let mut rep = ExperimentReport::new(plan)?;
    let mut discrepancies = Vec::new();
    let mut rates = Vec::new();
    let mut degenerate_ok: Option<bool> = None;

    for index in 0..plan.n_grid.len() {
        let d = plan.n_grid[index];
        let seed = plan.cell_seed(index);
        let forms = build_forms(plan, index)?;
        for (k, q) in forms.iter().enumerate() {
            let label = format!("k={}", k + 1);
            rep.cells.push(CellRow::new(d, &label, "sigma_k_sq", sigma_k_sq(q, law.excess_kurtosis())?));
            rep.cells.push(CellRow::new(d, &label, "op_norm", q.op_norm()));
        }
        let rate = napprox_rate(&forms, d, law.gamma(), norms);
        rep.cells.push(CellRow::new(d, format!("law={law}"), "rate", rate));
        let w = build_w(forms, &moments)?;
        let draw = |r: usize| -> Result<Vec<f64>> {
            let mut z = vec![0.0; d];
            law.fill(&mut seed.child(r as u64 + 1).rng(), &mut z);
            w.value(&z)
        };

        if w.is_degenerate() {
            let scale = w.qforms().iter().map(|q| q.trace().abs()).fold(1.0, f64::max);
            let probes = exec.try_map(DEGENERATE_PROBES, draw)?;
            let max_abs = probes.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            let vanishes = max_abs <= 1e-9 * scale;
            rep.flags.push(format!("d={d}: covariance of w vanishes; w ≡ 0 almost surely"));
            rep.cells.push(CellRow::new(d, "degenerate", "max_abs_w", max_abs));
            degenerate_ok = Some(degenerate_ok.unwrap_or(true) && vanishes);
            continue;
        }

        let support = f.support();
        let cov = w.covariance();
        let target = if support.is_empty() {
            f.eval(&[])
        } else {
            let sub = DMatrix::from_fn(support.len(), support.len(), |i, j| cov[(support[i], support[j])]);
            gaussian_expectation(|v| f.eval_on_support(v), &sub, QUADRATURE_TOL)?.0
        };
        let values = exec.try_map(plan.replicates, |r| Ok(f.eval(&draw(r)?)))?;
        let (mean, se) = mean_se(&values);
        let disc = (mean - target).abs();
        rep.cells.push(CellRow::new(d, format!("f={}", f.name), "surrogate", target));
        rep.cells.push(CellRow::new(d, format!("f={}", f.name), "discrepancy", disc).se(se));
        discrepancies.push((disc, se));
        rates.push(rate);
    }

    if let Some(ok) = degenerate_ok {
        rep.gates.push(Gate::new(
            "degenerate_w_vanishes",
            if ok { 1.0 } else { 0.0 },
            None,
            "zero covariance detected and sampled w identically zero",
            ok,
        ));
    }
    if discrepancies.len() >= 2 {
        let (first, last) = (discrepancies[0], discrepancies[discrepancies.len() - 1]);
        let se = (first.1 * first.1 + last.1 * last.1).sqrt();
        rep.gates.push(Gate::separated("discrepancy_decreases", first.0 - last.0, se));
        let decreasing = rates.windows(2).all(|w| w[1] < w[0]);
        rep.gates.push(Gate::new(
            "rate_decreases",
            rates[rates.len() - 1] / rates[0],
            None,
            "constant-free rate strictly decreasing in d",
            decreasing,
        ));
    }
    Ok(rep)
}
