//! Summary statistics used by the experiments.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Sample mean and its standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub fn median(v: &[f64]) -> f64 {
    let s = sorted(v);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Sample median with the Maritz–Jarrett standard error, a beta-weighted
/// average over all order statistics.
pub fn median_se(v: &[f64]) -> (f64, f64) {
    let s = sorted(v);
    let n = s.len();
    let med = median(v);
    if n < 4 {
        return (med, f64::INFINITY);
    }
    let m = (0.5 * n as f64 + 0.5).floor();
    let (a, b) = (m - 1.0, n as f64 - m);
    let nf = n as f64;
    let mut c1 = 0.0;
    let mut c2 = 0.0;
    let mut prev = 0.0;
    for (i, x) in s.iter().enumerate() {
        let cur = beta_reg(a, b, (i + 1) as f64 / nf);
        let w = cur - prev;
        prev = cur;
        c1 += w * x;
        c2 += w * x * x;
    }
    (med, (c2 - c1 * c1).max(0.0).sqrt())
}

/// Wilson score interval for `k` successes out of `n` at level `1 − α`.
pub fn wilson(k: usize, n: usize, alpha: f64) -> (f64, f64) {
    let z = normal_quantile(1.0 - alpha / 2.0);
    let nf = n as f64;
    let phat = k as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (phat + z * z / (2.0 * nf)) / denom;
    let half = z * (phat * (1.0 - phat) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn normal_quantile(q: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(q)
}

pub fn t_quantile(q: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom").inverse_cdf(q)
}

/// Ordinary least squares fit of `y = a + b·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    /// Residual-based standard error of the slope.
    pub slope_se: f64,
    /// 95% t interval for the slope.
    pub slope_ci: (f64, f64),
    pub r_squared: f64,
    /// Weights `cᵢ` with `slope = Σ cᵢyᵢ`, for propagating per-point errors.
    pub weights: Vec<f64>,
}

impl LinearFit {
    /// Standard error of the slope from independent per-point errors.
    pub fn propagated_se(&self, point_se: &[f64]) -> f64 {
        self.weights.iter().zip(point_se).map(|(c, s)| (c * s).powi(2)).sum::<f64>().sqrt()
    }
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let k = x.len();
    if k != y.len() || k < 2 {
        return Err(Error::InvalidParameter("a line fit needs at least two paired points".into()));
    }
    let kf = k as f64;
    let mx = x.iter().sum::<f64>() / kf;
    let my = y.iter().sum::<f64>() / kf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("a line fit needs distinct x values".into()));
    }
    let weights: Vec<f64> = x.iter().map(|v| (v - mx) / sxx).collect();
    let slope: f64 = weights.iter().zip(y).map(|(c, v)| c * v).sum();
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let (slope_se, slope_ci) = if k > 2 {
        let df = kf - 2.0;
        let se = (sse / df / sxx).sqrt();
        let t = t_quantile(0.975, df);
        (se, (slope - t * se, slope + t * se))
    } else {
        (f64::INFINITY, (f64::NEG_INFINITY, f64::INFINITY))
    };
    Ok(LinearFit { intercept, slope, slope_se, slope_ci, r_squared, weights })
}

/// Gauss–Hermite rule for `E g(Z)`, `Z ~ N(0,1)`, by the Golub–Welsch
/// eigenvalue method. Returns `(nodes, weights)` with weights summing to 1.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    // Jacobi matrix of the probabilists' Hermite polynomials
    let mut j = DMatrix::zeros(order, order);
    for k in 1..order {
        let off = (k as f64).sqrt();
        j[(k - 1, k)] = off;
        j[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &x)| (x, eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

/// Quadrature orders tried, in sequence, by [`gaussian_expectation`].
pub const QUADRATURE_ORDERS: [usize; 6] = [10, 20, 40, 80, 160, 320];

/// `E g(Lz)` for `z ~ N(0, I_m)` (m = 1 or 2), where `L` is any square
/// root of `cov`. The order doubles until successive estimates differ by
/// less than `tol`. Returns the estimate and the order used.
pub fn gaussian_expectation(g: impl Fn(&[f64]) -> f64, cov: &DMatrix<f64>, tol: f64) -> Result<(f64, usize)> {
    let m = cov.nrows();
    if m == 0 || m > 2 || cov.ncols() != m {
        return Err(Error::InvalidParameter(format!("quadrature supports 1 or 2 dimensions, got {m}")));
    }
    let root = psd_sqrt(cov)?;
    let mut prev: Option<f64> = None;
    for order in QUADRATURE_ORDERS {
        let (x, w) = gauss_hermite(order);
        let mut total = 0.0;
        let mut pt = vec![0.0; m];
        if m == 1 {
            for (xi, wi) in x.iter().zip(&w) {
                pt[0] = root[(0, 0)] * xi;
                total += wi * g(&pt);
            }
        } else {
            for (xi, wi) in x.iter().zip(&w) {
                for (xj, wj) in x.iter().zip(&w) {
                    pt[0] = root[(0, 0)] * xi + root[(0, 1)] * xj;
                    pt[1] = root[(1, 0)] * xi + root[(1, 1)] * xj;
                    total += wi * wj * g(&pt);
                }
            }
        }
        if let Some(p) = prev {
            if (total - p).abs() < tol {
                return Ok((total, order));
            }
        }
        prev = Some(total);
    }
    Err(Error::ExperimentAborted(format!(
        "Gauss–Hermite quadrature did not reach tolerance {tol:e} by order {}",
        QUADRATURE_ORDERS[QUADRATURE_ORDERS.len() - 1]
    )))
}

/// Symmetric square root of a PSD matrix (negative drift clamped to 0).
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l < -1e-8 * scale) {
        return Err(Error::Singular("covariance matrix is not positive semidefinite".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let mut v = eig.eigenvectors.clone();
    for (j, r) in roots.iter().enumerate() {
        v.column_mut(j).scale_mut(*r);
    }
    Ok(v * eig.eigenvectors.transpose())
}
