//! Experiment reports: per-cell rows, summaries and pass/fail gates.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::plan::{ExperimentKind, ExperimentPlan};

pub const CONSTANTS_NOTE: &str = "Absolute constants in the bounds are unknown; gates test shapes only";

/// One row of `cells.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub n: usize,
    pub params: String,
    pub quantity: String,
    pub estimate: f64,
    pub stderr: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub gate: String,
    pub pass: Option<bool>,
}

impl CellRow {
    pub fn new(n: usize, params: impl Into<String>, quantity: impl Into<String>, estimate: f64) -> Self {
        CellRow {
            n,
            params: params.into(),
            quantity: quantity.into(),
            estimate,
            stderr: None,
            ci_lo: None,
            ci_hi: None,
            gate: String::new(),
            pass: None,
        }
    }

    pub fn se(mut self, se: f64) -> Self {
        self.stderr = Some(se);
        self
    }

    pub fn ci(mut self, lo: f64, hi: f64) -> Self {
        self.ci_lo = Some(lo);
        self.ci_hi = Some(hi);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub estimate: f64,
    pub stderr: Option<f64>,
    pub criterion: String,
    pub pass: bool,
}

impl Gate {
    pub fn new(name: impl Into<String>, estimate: f64, stderr: Option<f64>, criterion: impl Into<String>, pass: bool) -> Self {
        Gate { name: name.into(), estimate, stderr, criterion: criterion.into(), pass }
    }

    /// Fails only if the whole `estimate ± 2·se` band lies outside `[lo, hi]`.
    pub fn band_in_range(name: impl Into<String>, estimate: f64, se: f64, lo: f64, hi: f64) -> Self {
        let pass = estimate + 2.0 * se >= lo && estimate - 2.0 * se <= hi;
        Gate::new(name, estimate, Some(se), format!("estimate ± 2·se meets [{lo}, {hi}]"), pass)
    }

    /// Passes when a difference is positive beyond two standard errors.
    pub fn separated(name: impl Into<String>, diff: f64, se: f64) -> Self {
        Gate::new(name, diff, Some(se), "difference > 2·se", diff > 2.0 * se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub note: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub plan: ExperimentPlan,
    pub cells: Vec<CellRow>,
    pub summaries: Vec<Summary>,
    pub gates: Vec<Gate>,
    /// Conditions detected during the run (degeneracy, unreliable cells, …).
    pub flags: Vec<String>,
    pub passed: bool,
}

impl ExperimentReport {
    pub(crate) fn new(plan: &ExperimentPlan) -> Result<Self> {
        Ok(ExperimentReport {
            kind: plan.kind,
            note: CONSTANTS_NOTE.to_string(),
            master_seed: plan.master_seed,
            config_hash: plan.hash()?,
            plan: plan.clone(),
            cells: Vec::new(),
            summaries: Vec::new(),
            gates: Vec::new(),
            flags: Vec::new(),
            passed: false,
        })
    }

    pub(crate) fn summary(&mut self, name: impl Into<String>, value: f64, stderr: Option<f64>) {
        self.summaries.push(Summary { name: name.into(), value, stderr });
    }

    pub(crate) fn finish(mut self) -> Self {
        self.passed = !self.gates.is_empty() && self.gates.iter().all(|g| g.pass);
        self
    }

    pub fn gate(&self, name: &str) -> Option<&Gate> {
        self.gates.iter().find(|g| g.name == name)
    }

    pub fn summary_value(&self, name: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    /// Rows whose quantity matches `quantity`, in grid order.
    pub fn rows<'a>(&'a self, quantity: &'a str) -> impl Iterator<Item = &'a CellRow> + 'a {
        self.cells.iter().filter(move |c| c.quantity == quantity)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Write `report.json` and `cells.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        let mut w = csv::Writer::from_path(dir.join("cells.csv"))?;
        w.write_record(["n", "params", "quantity", "estimate", "stderr", "ci_lo", "ci_hi", "gate", "pass"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            w.write_record([
                c.n.to_string(),
                c.params.clone(),
                c.quantity.clone(),
                c.estimate.to_string(),
                opt(c.stderr),
                opt(c.ci_lo),
                opt(c.ci_hi),
                c.gate.clone(),
                c.pass.map(|b| b.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
