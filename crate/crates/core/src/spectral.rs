//! Eigendecomposition of the scaled Gram matrix `p⁻¹XXᵀ` and the scalar
//! functionals of its spectrum that govern identifiability and the
//! concentration / normal-approximation rates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this eigenvalue variance `ν` is reported as degenerate.
pub const NU_VFRAK_FLOOR: f64 = 1e-12;

/// Spectrum of `p⁻¹XXᵀ = U·diag(λ)·Uᵀ`, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct GramSpectrum {
    n: usize,
    p: usize,
    lambdas: Vec<f64>,
    u: DMatrix<f64>,
    n0: usize,
}

/// A quantity carried in log space together with its (clamped) value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogScaled {
    pub log: f64,
    pub value: f64,
}

impl LogScaled {
    fn from_log(log: f64) -> Self {
        let value = if log == f64::NEG_INFINITY {
            0.0
        } else {
            log.clamp(f64::MIN_POSITIVE.ln(), f64::MAX.ln()).exp()
        };
        LogScaled { log, value }
    }
}

fn positive_count(lambdas: &[f64], n: usize, p: usize) -> usize {
    let top = lambdas.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    let thresh = n.max(p) as f64 * f64::EPSILON * top;
    lambdas.iter().take_while(|&&l| l > thresh).count()
}

impl GramSpectrum {
    /// Build from eigenvalues alone, with `U = I`. Useful when only the
    /// spectrum matters (all estimator formulas act in the eigenbasis).
    pub fn from_eigenvalues(lambdas: Vec<f64>, p: usize) -> Result<Self> {
        let n = lambdas.len();
        Self::from_parts(lambdas, DMatrix::identity(n, n), p)
    }

    /// Build from explicit eigenpairs. Eigenvalues must be finite, nonnegative
    /// and sorted descending; `u` must be `n×n`.
    pub fn from_parts(lambdas: Vec<f64>, u: DMatrix<f64>, p: usize) -> Result<Self> {
        let n = lambdas.len();
        if n == 0 || p == 0 {
            return Err(Error::InvalidParameter("spectrum needs n ≥ 1 and p ≥ 1".into()));
        }
        if u.nrows() != n || u.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "eigenvector matrix is {}×{}, expected {n}×{n}",
                u.nrows(),
                u.ncols()
            )));
        }
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidParameter("eigenvalues must be finite and ≥ 0".into()));
        }
        if lambdas.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter("eigenvalues must be sorted descending".into()));
        }
        let n0 = positive_count(&lambdas, n, p);
        Ok(GramSpectrum { n, p, lambdas, u, n0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambdas[0]
    }

    /// Smallest eigenvalue counted as positive, `λ_{n₀}`.
    pub fn lambda_min_positive(&self) -> Result<f64> {
        if self.n0 == 0 {
            return Err(Error::DegenerateSpectrum("no positive eigenvalues (n₀ = 0)".into()));
        }
        Ok(self.lambdas[self.n0 - 1])
    }

    /// `y̌ = Uᵀy`.
    pub fn rotate(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "vector has length {}, spectrum has n = {}",
                y.len(),
                self.n
            )));
        }
        let yv = DVector::from_column_slice(y);
        Ok(self.u.tr_mul(&yv).as_slice().to_vec())
    }

    /// `U·diag(λ)·Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (j, &l) in self.lambdas.iter().enumerate() {
            scaled.column_mut(j).scale_mut(l);
        }
        scaled * self.u.transpose()
    }
}

/// Eigendecomposition of `p⁻¹XXᵀ` for an `n×p` design.
///
/// For `p > n` the `n×n` Gram matrix is decomposed directly; otherwise the
/// thin SVD of `X` is used and the left factor is completed to a full
/// orthogonal basis.
pub fn decompose_gram(x: &DMatrix<f64>) -> Result<GramSpectrum> {
    let (n, p) = x.shape();
    if n < 2 || p < 1 {
        return Err(Error::InvalidParameter(format!("design must have n ≥ 2 and p ≥ 1, got {n}×{p}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix contains NaN or infinite entries".into()));
    }
    let pf = p as f64;

    let (mut pairs, u_full) = if p > n {
        let gram = (x * x.transpose()) / pf;
        let eig = gram.symmetric_eigen();
        let pairs: Vec<(f64, usize)> =
            eig.eigenvalues.iter().copied().enumerate().map(|(i, l)| (l, i)).collect();
        (pairs, eig.eigenvectors)
    } else {
        let svd = x.clone().svd(true, false);
        let u_thin = svd.u.ok_or_else(|| Error::Singular("SVD failed to produce U".into()))?;
        let k = u_thin.ncols();
        let mut pairs: Vec<(f64, usize)> =
            svd.singular_values.iter().map(|s| s * s / pf).zip(0..k).collect();
        let u_full = complete_basis(&u_thin);
        for j in k..n {
            pairs.push((0.0, j));
        }
        (pairs, u_full)
    };

    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut u = DMatrix::zeros(n, n);
    let mut lambdas = Vec::with_capacity(n);
    for (dst, &(l, src)) in pairs.iter().enumerate() {
        u.set_column(dst, &u_full.column(src));
        lambdas.push(l.max(0.0));
    }
    let n0 = positive_count(&lambdas, n, p);
    Ok(GramSpectrum { n, p, lambdas, u, n0 })
}

/// Extend orthonormal columns `q` (n×k) to an n×n orthogonal matrix whose
/// first k columns are exactly `q`.
fn complete_basis(q: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = q.shape();
    if k == n {
        return q.clone();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_ba515);
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (n, k)).copy_from(q);
    for j in k..n {
        for i in 0..n {
            m[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let qfull = m.qr().q();
    let mut out = qfull;
    out.view_mut((0, 0), (n, k)).copy_from(q);
    out
}

/// Empirical variance of the eigenvalues, `mean(λ²) − mean(λ)²`.
pub fn eigvar(spec: &GramSpectrum) -> f64 {
    eigvar_of(spec.lambdas())
}

pub(crate) fn eigvar_of(lambdas: &[f64]) -> f64 {
    let n = lambdas.len() as f64;
    let mean = lambdas.iter().sum::<f64>() / n;
    lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n
}

/// `ω(Λ) = 1 / ((λ₁+1)²(λ_{n₀}⁻¹+1)²)`.
pub fn omega(spec: &GramSpectrum) -> Result<f64> {
    let lmin = spec.lambda_min_positive()?;
    Ok(1.0 / ((spec.lambda_max() + 1.0).powi(2) * (1.0 / lmin + 1.0).powi(2)))
}

/// `χ(η₀², Λ) = 1 / (2(η₀²+1)⁴(λ₁+1)⁴(λ_{n₀}⁻¹+1)²)`.
pub fn chi(eta0_sq: f64, spec: &GramSpectrum) -> Result<f64> {
    if !(eta0_sq >= 0.0) {
        return Err(Error::InvalidParameter("η₀² must be ≥ 0".into()));
    }
    let lmin = spec.lambda_min_positive()?;
    Ok(1.0
        / (2.0
            * (eta0_sq + 1.0).powi(4)
            * (spec.lambda_max() + 1.0).powi(4)
            * (1.0 / lmin + 1.0).powi(2)))
}

/// κ from its scalar ingredients, in log space.
pub fn kappa_from_scalars(sigma0_sq: f64, eta0_sq: f64, lambda1: f64, lambda_n0: f64, vfrak: f64) -> LogScaled {
    if vfrak <= 0.0 || eta0_sq <= 0.0 {
        return LogScaled::from_log(f64::NEG_INFINITY);
    }
    let log = 2.0 * sigma0_sq.ln() + 8.0 * eta0_sq.ln() + 2.0 * vfrak.ln()
        - 5.0 * (sigma0_sq + 1.0).ln()
        - 12.0 * (eta0_sq + 1.0).ln()
        - 18.0 * (lambda1 + 1.0).ln()
        - 8.0 * (1.0 / lambda_n0 + 1.0).ln()
        - 2.0 * (vfrak + 1.0).ln();
    LogScaled::from_log(log)
}

/// The concentration constant κ(σ₀², η₀², Λ); zero when 𝔳(Λ) = 0.
pub fn kappa(sigma0_sq: f64, eta0_sq: f64, spec: &GramSpectrum) -> Result<LogScaled> {
    let lmin = spec.lambda_min_positive()?;
    Ok(kappa_from_scalars(sigma0_sq, eta0_sq, spec.lambda_max(), lmin, eigvar(spec)))
}

/// ν from its scalar ingredients, in log space.
pub fn nu_from_scalars(sigma0_sq: f64, eta0_sq: f64, lambda1: f64, vfrak: f64) -> Result<LogScaled> {
    if vfrak < NU_VFRAK_FLOOR {
        return Err(Error::DegenerateSpectrum(format!(
            "eigenvalue variance {vfrak:e} below floor; ν is unbounded"
        )));
    }
    if !(eta0_sq > 0.0) || !(sigma0_sq > 0.0) {
        return Err(Error::InvalidParameter("ν needs σ₀² > 0 and η₀² > 0".into()));
    }
    let log = 9.0 * (sigma0_sq + 1.0).ln() + 16.0 * (eta0_sq + 1.0).ln() + 24.0 * (lambda1 + 1.0).ln()
        - 3.0 * sigma0_sq.ln()
        - eta0_sq.ln()
        + 3.0 * (vfrak + 1.0).ln()
        - 3.0 * vfrak.ln();
    Ok(LogScaled::from_log(log))
}

/// The normal-approximation constant ν(σ₀², η₀², Λ).
pub fn nu(sigma0_sq: f64, eta0_sq: f64, spec: &GramSpectrum) -> Result<LogScaled> {
    nu_from_scalars(sigma0_sq, eta0_sq, spec.lambda_max(), eigvar(spec))
}
