//! Experiment configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::randsrc::{SeedSpec, SubGaussianLaw};
use crate::remodel::{Design, ModelParams};

use super::testfn::TestFnSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Consistency,
    TailEnvelope,
    Normality,
    Coupling,
    SteinDiscrepancy,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Consistency => "consistency",
            ExperimentKind::TailEnvelope => "tail_envelope",
            ExperimentKind::Normality => "normality",
            ExperimentKind::Coupling => "coupling",
            ExperimentKind::SteinDiscrepancy => "stein_discrepancy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    GaussianIid,
    Identity,
    /// Equispaced Gram eigenvalues from `lambda_hi` down to `lambda_lo`.
    Equispaced,
}

/// How a design is built for each n in the grid; `p = round(p_ratio·n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignPlan {
    pub kind: DesignKind,
    #[serde(default = "default_p_ratio")]
    pub p_ratio: f64,
    #[serde(default = "default_lambda_lo")]
    pub lambda_lo: f64,
    #[serde(default = "default_lambda_hi")]
    pub lambda_hi: f64,
}

fn default_p_ratio() -> f64 {
    2.0
}

fn default_lambda_lo() -> f64 {
    0.5
}

fn default_lambda_hi() -> f64 {
    1.5
}

impl Default for DesignPlan {
    fn default() -> Self {
        DesignPlan { kind: DesignKind::GaussianIid, p_ratio: 2.0, lambda_lo: 0.5, lambda_hi: 1.5 }
    }
}

impl DesignPlan {
    pub fn p_for(&self, n: usize) -> usize {
        ((self.p_ratio * n as f64).round() as usize).max(1)
    }

    pub fn design_for(&self, n: usize) -> Design {
        match self.kind {
            DesignKind::GaussianIid => Design::GaussianIid,
            DesignKind::Identity => Design::Identity,
            DesignKind::Equispaced => {
                let step = if n > 1 { (self.lambda_hi - self.lambda_lo) / (n - 1) as f64 } else { 0.0 };
                Design::FixedSpectrum((0..n).map(|i| self.lambda_hi - step * i as f64).collect())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.p_ratio.is_finite() && self.p_ratio > 0.0) {
            return Err(Error::InvalidParameter("design.p_ratio must be > 0".into()));
        }
        if self.kind == DesignKind::Equispaced
            && !(self.lambda_lo >= 0.0 && self.lambda_hi >= self.lambda_lo && self.lambda_hi.is_finite())
        {
            return Err(Error::InvalidParameter("equispaced design needs 0 ≤ lambda_lo ≤ lambda_hi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailOptions {
    /// Thresholds r for `P(sup |σ*² − σ₀²| > r)`.
    pub r_grid: Vec<f64>,
    /// Right end R of the η² range.
    #[serde(default = "default_eta_max")]
    pub eta_max: f64,
    /// Grid points G on `[0, R]`.
    #[serde(default = "default_tail_grid")]
    pub grid: usize,
}

fn default_eta_max() -> f64 {
    10.0
}

fn default_tail_grid() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    Additive,
    SparseZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingPlan {
    pub scheme: CouplingKind,
    /// Additive scheme: `δ = scale · n^(−delta_power)` for each scale.
    #[serde(default)]
    pub delta_scales: Vec<f64>,
    #[serde(default = "default_delta_power")]
    pub delta_power: f64,
    /// Sparse scheme: fraction of effects zeroed.
    #[serde(default)]
    pub fraction: f64,
}

fn default_delta_power() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QKind {
    /// `O·diag(s)·Oᵀ/√d` with Haar O and s equispaced on `[s_lo, s_hi]`.
    Equispaced,
    /// `I/√d`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteinOptions {
    /// Number of quadratic forms K (1 or 2).
    #[serde(default = "default_k")]
    pub k: usize,
    pub q_kind: QKind,
    #[serde(default = "default_lambda_lo")]
    pub s_lo: f64,
    #[serde(default = "default_lambda_hi")]
    pub s_hi: f64,
    /// Law of the coordinates of ζ.
    pub law: SubGaussianLaw,
}

fn default_k() -> usize {
    1
}

fn default_law() -> SubGaussianLaw {
    SubGaussianLaw::GAUSSIAN
}

fn default_params() -> ModelParams {
    ModelParams { sigma0_sq: 1.0, eta0_sq: 1.0 }
}

/// A complete, reproducible description of one experiment. For the Stein
/// experiment `n_grid` holds the dimensions d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_law")]
    pub beta_law: SubGaussianLaw,
    #[serde(default = "default_law")]
    pub eps_law: SubGaussianLaw,
    #[serde(default = "default_params")]
    pub params: ModelParams,
    #[serde(default)]
    pub design: DesignPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_function: Option<TestFnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<TailOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<CouplingPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stein: Option<SteinOptions>,
}

/// Smallest replicate count for which stderrs are reported.
pub const MIN_REPLICATES: usize = 100;

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < MIN_REPLICATES {
            return Err(Error::InvalidParameter(format!(
                "replicates = {} is below the minimum of {MIN_REPLICATES}",
                self.replicates
            )));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("n_grid must be non-empty and strictly increasing".into()));
        }
        let min_n = if self.kind == ExperimentKind::SteinDiscrepancy { 1 } else { 2 };
        if self.n_grid[0] < min_n {
            return Err(Error::InvalidParameter(format!("n_grid entries must be ≥ {min_n}")));
        }
        ModelParams::new(self.params.sigma0_sq, self.params.eta0_sq)?;
        self.design.validate()?;
        match self.kind {
            ExperimentKind::TailEnvelope => {
                let t = self.tail.as_ref().ok_or_else(|| missing("tail"))?;
                if t.r_grid.is_empty() || t.r_grid.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                    return Err(Error::InvalidParameter("tail.r_grid must hold positive thresholds".into()));
                }
                if !(t.eta_max > 0.0 && t.eta_max.is_finite()) || t.grid < 2 {
                    return Err(Error::InvalidParameter("tail needs eta_max > 0 and grid ≥ 2".into()));
                }
            }
            ExperimentKind::Normality => {
                let f = self.test_function.as_ref().ok_or_else(|| missing("test_function"))?;
                if f.coords.iter().any(|&c| c > 1) {
                    return Err(Error::InvalidParameter("normality test functions act on ℝ²".into()));
                }
            }
            ExperimentKind::Coupling => {
                let c = self.coupling.as_ref().ok_or_else(|| missing("coupling"))?;
                match c.scheme {
                    CouplingKind::Additive => {
                        if c.delta_scales.is_empty() || c.delta_scales.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                            return Err(Error::InvalidParameter(
                                "coupling.delta_scales must hold nonnegative values".into(),
                            ));
                        }
                    }
                    CouplingKind::SparseZero => {
                        if !(0.0..=1.0).contains(&c.fraction) {
                            return Err(Error::InvalidParameter("coupling.fraction must lie in [0, 1]".into()));
                        }
                    }
                }
            }
            ExperimentKind::SteinDiscrepancy => {
                let s = self.stein.as_ref().ok_or_else(|| missing("stein"))?;
                if !(1..=2).contains(&s.k) {
                    return Err(Error::InvalidParameter("stein.k must be 1 or 2".into()));
                }
                if !(s.s_lo > 0.0 && s.s_hi >= s.s_lo && s.s_hi.is_finite()) {
                    return Err(Error::InvalidParameter("stein needs 0 < s_lo ≤ s_hi".into()));
                }
                let f = self.test_function.as_ref().ok_or_else(|| missing("test_function"))?;
                if f.coords.iter().any(|&c| c >= 2 * s.k) {
                    return Err(Error::InvalidParameter("test function coordinate exceeds 2K".into()));
                }
            }
            ExperimentKind::Consistency => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Seed for grid cell `index`.
    pub fn cell_seed(&self, index: usize) -> SeedSpec {
        SeedSpec::new(self.master_seed, 1 + index as u64)
    }

    /// The configuration used by the bundled acceptance runs.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = ExperimentPlan {
            kind,
            n_grid: vec![100, 200, 400, 800],
            replicates: 500,
            master_seed: 20_240_601,
            beta_law: SubGaussianLaw::GAUSSIAN,
            eps_law: SubGaussianLaw::GAUSSIAN,
            params: default_params(),
            design: DesignPlan::default(),
            test_function: None,
            tail: None,
            coupling: None,
            stein: None,
        };
        match kind {
            ExperimentKind::Consistency => base,
            ExperimentKind::TailEnvelope => ExperimentPlan {
                n_grid: vec![50, 100, 200, 400],
                replicates: 20_000,
                tail: Some(TailOptions { r_grid: vec![0.3, 0.4, 0.5], eta_max: 10.0, grid: 64 }),
                ..base
            },
            ExperimentKind::Normality => ExperimentPlan {
                replicates: 2000,
                // small η₀² puts mass on the boundary at small n, which the
                // even test function can see
                params: ModelParams { sigma0_sq: 1.0, eta0_sq: 0.1 },
                test_function: Some(TestFnSpec::tanh_product(vec![0, 1], vec![3.0, 3.0])),
                ..base
            },
            ExperimentKind::Coupling => ExperimentPlan {
                coupling: Some(CouplingPlan {
                    scheme: CouplingKind::Additive,
                    delta_scales: vec![0.0, 1.0, 10.0],
                    delta_power: 1.0,
                    fraction: 0.0,
                }),
                ..base
            },
            ExperimentKind::SteinDiscrepancy => ExperimentPlan {
                n_grid: vec![50, 400],
                replicates: 50_000,
                test_function: Some(TestFnSpec::tanh_product(vec![0], vec![2.0])),
                stein: Some(SteinOptions {
                    k: 1,
                    q_kind: QKind::Equispaced,
                    s_lo: 0.5,
                    s_hi: 1.5,
                    law: SubGaussianLaw::GAUSSIAN,
                }),
                ..base
            },
        }
    }
}

fn missing(section: &str) -> Error {
    Error::InvalidParameter(format!("this experiment kind needs a [{section}] section"))
}
