//! Quadratic forms `ζᵀQζ` in vectors of independent, mean-0, variance-1
//! coordinates: exact moment algebra, the centred `w`-vector built from a
//! list of forms and their diagonal parts, and Lipschitz-parameterized
//! families `Q(u) = V·diag(t(u))·Vᵀ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::randsrc::{Moments, SeedSpec};

/// Dimension above which the operator norm uses power iteration.
pub const DENSE_EIGEN_MAX_DIM: usize = 2048;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;
const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;

/// A symmetric positive semidefinite matrix with its commonly used scalars
/// cached.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    q: DMatrix<f64>,
    diag: Vec<f64>,
    trace: f64,
    trace_sq: f64,
    op_norm: f64,
    hs_norm: f64,
    min_eig: f64,
}

impl QuadraticForm {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let (r, c) = q.shape();
        if r != c || r == 0 {
            return Err(Error::DimensionMismatch(format!("quadratic form matrix is {r}×{c}")));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quadratic form matrix".into()));
        }
        let scale = q.amax().max(1.0);
        let asym = (&q - q.transpose()).amax();
        if asym >= SYMMETRY_TOL * scale {
            return Err(Error::InvalidParameter(format!("matrix is not symmetric (max |Q−Qᵀ| = {asym:e})")));
        }
        let q = (&q + q.transpose()) * 0.5;
        let (op_norm, min_eig) = extreme_eigenvalues(&q);
        if min_eig < -PSD_TOL * op_norm.max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidParameter(format!(
                "matrix is not positive semidefinite (smallest eigenvalue {min_eig:e})"
            )));
        }
        let diag: Vec<f64> = q.diagonal().iter().copied().collect();
        let trace = diag.iter().sum();
        let hs_sq = q.norm_squared();
        Ok(QuadraticForm {
            diag,
            trace,
            // Q symmetric: tr(Q²) = Σ q_ij²
            trace_sq: hs_sq,
            op_norm: op_norm.max(0.0),
            hs_norm: hs_sq.sqrt(),
            min_eig: min_eig.max(0.0),
            q,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self::new(DMatrix::identity(d, d)).expect("identity is PSD")
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// `tr(Q²)`.
    pub fn trace_sq(&self) -> f64 {
        self.trace_sq
    }

    /// `tr(Q̌²) = Σ q_ii²`.
    pub fn diag_trace_sq(&self) -> f64 {
        self.diag.iter().map(|d| d * d).sum()
    }

    pub fn op_norm(&self) -> f64 {
        self.op_norm
    }

    pub fn hs_norm(&self) -> f64 {
        self.hs_norm
    }

    /// Smallest eigenvalue, with tolerated negative drift clamped to zero.
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eig
    }
}

/// Largest and smallest eigenvalue of a symmetric matrix.
fn extreme_eigenvalues(q: &DMatrix<f64>) -> (f64, f64) {
    let d = q.nrows();
    if d <= DENSE_EIGEN_MAX_DIM {
        let ev = q.clone().symmetric_eigenvalues();
        let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
        (max.abs().max(min.abs()).max(max), min)
    } else {
        let top = power_iteration(q);
        // shift so the smallest eigenvalue becomes the dominant one
        let shifted = DMatrix::identity(d, d) * top - q;
        let bottom = top - power_iteration(&shifted);
        (top.max(bottom.abs()), bottom)
    }
}

/// Dominant eigenvalue (in magnitude) of a symmetric matrix.
fn power_iteration(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    let mut v = DVector::from_fn(d, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = a * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lambda).abs() <= POWER_TOL * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Per-coordinate moments of ζ.
#[derive(Debug, Clone)]
pub enum CoordMoments {
    /// All coordinates share one law.
    Common(Moments),
    /// Coordinate `i` has moments `v[i]`.
    PerCoordinate(Vec<Moments>),
}

impl CoordMoments {
    /// First `first` coordinates follow `a`, the rest follow `b`.
    pub fn blocks(a: Moments, first: usize, b: Moments, total: usize) -> Self {
        let v = (0..total).map(|i| if i < first { a } else { b }).collect();
        CoordMoments::PerCoordinate(v)
    }

    fn get(&self, i: usize) -> Moments {
        match self {
            CoordMoments::Common(m) => *m,
            CoordMoments::PerCoordinate(v) => v[i],
        }
    }

    fn check(&self, d: usize, need_symmetric: bool) -> Result<()> {
        if let CoordMoments::PerCoordinate(v) = self {
            if v.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "{} coordinate laws for dimension {d}",
                    v.len()
                )));
            }
        }
        let all: Vec<Moments> = match self {
            CoordMoments::Common(m) => vec![*m],
            CoordMoments::PerCoordinate(v) => v.clone(),
        };
        for m in all {
            if m.mu4 < 1.0 {
                return Err(Error::InvalidParameter(format!("fourth moment {} < 1", m.mu4)));
            }
            if need_symmetric && m.mu3 != 0.0 {
                return Err(Error::UnsupportedLaw(format!(
                    "covariance closed form needs μ3 = 0, got {}",
                    m.mu3
                )));
            }
        }
        Ok(())
    }
}

impl From<Moments> for CoordMoments {
    fn from(m: Moments) -> Self {
        CoordMoments::Common(m)
    }
}

/// `ζᵀQζ`, evaluated as `(Qζ)·ζ`.
pub fn eval_qf(qf: &QuadraticForm, z: &[f64]) -> Result<f64> {
    if z.len() != qf.dim() {
        return Err(Error::DimensionMismatch(format!(
            "vector length {} vs form dimension {}",
            z.len(),
            qf.dim()
        )));
    }
    let zv = DVector::from_column_slice(z);
    Ok((qf.matrix() * &zv).dot(&zv))
}

/// `Var(ζᵀQζ) = μ₄ᵀq₂ − 3‖q‖² + 2tr(Q²)` where `q` is the diagonal of Q
/// and `q₂` its elementwise square.
pub fn qf_variance(qf: &QuadraticForm, moments: &CoordMoments) -> Result<f64> {
    moments.check(qf.dim(), false)?;
    let diag_part: f64 = qf
        .diag()
        .iter()
        .enumerate()
        .map(|(i, &d)| (moments.get(i).mu4 - 3.0) * d * d)
        .sum();
    Ok(diag_part + 2.0 * qf.trace_sq())
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // symmetric: tr(AB) = Σ a_ij b_ij
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `Cov(ζᵀAζ, ζᵀBζ) = Σᵢ(μ4ᵢ − 3)aᵢᵢbᵢᵢ + 2tr(AB)` for laws with μ3 = 0.
pub fn qf_covariance(a: &QuadraticForm, b: &QuadraticForm, moments: &CoordMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("forms of dimension {} and {}", a.dim(), b.dim())));
    }
    moments.check(a.dim(), true)?;
    let diag_part: f64 = a
        .diag()
        .iter()
        .zip(b.diag())
        .enumerate()
        .map(|(i, (x, y))| (moments.get(i).mu4 - 3.0) * x * y)
        .sum();
    Ok(diag_part + 2.0 * trace_product(a.matrix(), b.matrix()))
}

/// `σ² = 2tr(Q²) + γ₂·tr(Q̌²)` for iid coordinates with excess kurtosis γ₂.
pub fn sigma_k_sq(qf: &QuadraticForm, gamma2: f64) -> Result<f64> {
    if gamma2 < -2.0 {
        return Err(Error::InvalidParameter(format!("excess kurtosis {gamma2} < −2")));
    }
    Ok(2.0 * qf.trace_sq() + gamma2 * qf.diag_trace_sq())
}

/// Seminorms `|f|₂`, `|f|₃` of a test function, as used by the rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FNorms {
    pub f2: f64,
    pub f3: f64,
}

/// The constant-free normal-approximation rate
/// `(γ+1)⁸{K^{3/2}d^{1/2}|f|₂ q² + K³d|f|₃ q³}` with `q = max‖Q_k‖`.
pub fn napprox_rate(qforms: &[QuadraticForm], d: usize, gamma: f64, f: FNorms) -> f64 {
    let qmax = qforms.iter().map(|q| q.op_norm()).fold(0.0, f64::max);
    napprox_rate_from_norm(qforms.len(), qmax, d, gamma, f)
}

pub fn napprox_rate_from_norm(k: usize, qmax: f64, d: usize, gamma: f64, f: FNorms) -> f64 {
    let k = k as f64;
    let d = d as f64;
    (gamma + 1.0).powi(8)
        * (k.powf(1.5) * d.sqrt() * f.f2 * qmax.powi(2) + k.powi(3) * d * f.f3 * qmax.powi(3))
}

/// The centred vector `(w₁, w̌₁, …, w_K, w̌_K)` with
/// `w_k = ζᵀQ_kζ − tr Q_k`, `w̌_k = ζᵀQ̌_kζ − tr Q_k`, and its exact covariance.
#[derive(Debug, Clone)]
pub struct WVector {
    qforms: Vec<QuadraticForm>,
    v_cov: DMatrix<f64>,
}

impl WVector {
    pub fn k(&self) -> usize {
        self.qforms.len()
    }

    pub fn dim(&self) -> usize {
        self.qforms[0].dim()
    }

    pub fn qforms(&self) -> &[QuadraticForm] {
        &self.qforms
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.v_cov
    }

    pub fn value(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * self.k());
        for qf in &self.qforms {
            let full = eval_qf(qf, z)?;
            let diag: f64 = qf.diag().iter().zip(z).map(|(d, x)| d * x * x).sum();
            out.push(full - qf.trace());
            out.push(diag - qf.trace());
        }
        Ok(out)
    }

    /// True when the covariance vanishes, i.e. `w` is almost surely zero.
    pub fn is_degenerate(&self) -> bool {
        let scale = self.qforms.iter().map(|q| q.trace_sq()).fold(0.0, f64::max);
        self.v_cov.amax() <= 1e-12 * scale.max(f64::MIN_POSITIVE)
    }
}

/// Assemble the `w`-vector for `qforms` and fill its covariance in closed form.
pub fn build_w(qforms: Vec<QuadraticForm>, moments: &CoordMoments) -> Result<WVector> {
    let Some(first) = qforms.first() else {
        return Err(Error::InvalidParameter("need at least one quadratic form".into()));
    };
    let d = first.dim();
    if qforms.iter().any(|q| q.dim() != d) {
        return Err(Error::DimensionMismatch("quadratic forms differ in dimension".into()));
    }
    moments.check(d, true)?;
    let k = qforms.len();
    let mut v = DMatrix::zeros(2 * k, 2 * k);
    for a in 0..k {
        for b in a..k {
            let qa = &qforms[a];
            let qb = &qforms[b];
            let mut diag_kurt = 0.0; // Σ (μ4 − 3) a_ii b_ii
            let mut diag_plain = 0.0; // Σ a_ii b_ii
            for i in 0..d {
                let prod = qa.diag()[i] * qb.diag()[i];
                diag_kurt += (moments.get(i).mu4 - 3.0) * prod;
                diag_plain += prod;
            }
            let full_full = diag_kurt + 2.0 * trace_product(qa.matrix(), qb.matrix());
            // tr(Q_a Q̌_b) = Σ a_ii b_ii, so the cross and diagonal blocks agree
            let with_diag = diag_kurt + 2.0 * diag_plain;
            v[(2 * a, 2 * b)] = full_full;
            v[(2 * a, 2 * b + 1)] = with_diag;
            v[(2 * a + 1, 2 * b)] = with_diag;
            v[(2 * a + 1, 2 * b + 1)] = with_diag;
            if a != b {
                for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    v[(2 * b + c, 2 * a + r)] = v[(2 * a + r, 2 * b + c)];
                }
            }
        }
    }
    Ok(WVector { qforms, v_cov: v })
}

/// Coordinate functions `t(u)`, writing `m` values into the output slice.
pub type CoordFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// `Q(u) = V·diag(t₁(u),…,t_m(u))·Vᵀ` for `u ∈ [0,R]^K`, with each `tᵢ`
/// L-Lipschitz.
#[derive(Clone)]
pub struct QFFamily {
    v: DMatrix<f64>,
    t: CoordFn,
    lipschitz: f64,
    radius: f64,
    k: usize,
}

impl fmt::Debug for QFFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QFFamily")
            .field("d", &self.v.nrows())
            .field("m", &self.v.ncols())
            .field("lipschitz", &self.lipschitz)
            .field("radius", &self.radius)
            .field("k", &self.k)
            .finish()
    }
}

impl QFFamily {
    pub fn new(v: DMatrix<f64>, t: CoordFn, lipschitz: f64, radius: f64, k: usize) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) || !(lipschitz >= 0.0) || k == 0 {
            return Err(Error::InvalidParameter("family needs R > 0, L ≥ 0, K ≥ 1".into()));
        }
        Ok(QFFamily { v, t, lipschitz, radius, k })
    }

    /// The resolvent family `tᵢ(η²) = (η²λᵢ + 1)⁻¹` on `[0, R]`, which is
    /// `max λᵢ`-Lipschitz.
    pub fn resolvent(v: DMatrix<f64>, lambdas: Vec<f64>, radius: f64) -> Result<Self> {
        if lambdas.len() != v.ncols() {
            return Err(Error::DimensionMismatch("one eigenvalue per column of V".into()));
        }
        let lip = lambdas.iter().copied().fold(0.0, f64::max);
        let t: CoordFn = Arc::new(move |u: &[f64], out: &mut [f64]| {
            for (o, l) in out.iter_mut().zip(&lambdas) {
                *o = 1.0 / (u[0] * l + 1.0);
            }
        });
        Self::new(v, t, lip, radius, 1)
    }

    /// `t(u) ≡ t0`.
    pub fn constant(v: DMatrix<f64>, t0: Vec<f64>, radius: f64, k: usize) -> Result<Self> {
        if t0.len() != v.ncols() {
            return Err(Error::DimensionMismatch("one coefficient per column of V".into()));
        }
        let t: CoordFn = Arc::new(move |_: &[f64], out: &mut [f64]| out.copy_from_slice(&t0));
        Self::new(v, t, 0.0, radius, k)
    }

    pub fn d(&self) -> usize {
        self.v.nrows()
    }

    pub fn m(&self) -> usize {
        self.v.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn coefficients(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_point(u)?;
        let mut out = vec![0.0; self.m()];
        (self.t)(u, &mut out);
        Ok(out)
    }

    fn check_point(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.k {
            return Err(Error::DimensionMismatch(format!("point has {} coordinates, K = {}", u.len(), self.k)));
        }
        if u.iter().any(|&x| !(0.0..=self.radius).contains(&x)) {
            return Err(Error::InvalidParameter(format!("point {u:?} outside [0, {}]^K", self.radius)));
        }
        Ok(())
    }

    /// `‖VᵀV‖`.
    pub fn vtv_norm(&self) -> f64 {
        let vtv = self.v.tr_mul(&self.v);
        extreme_eigenvalues(&vtv).0
    }

    /// Check `|tᵢ(u) − tᵢ(u′)| ≤ L‖u − u′‖` on random pairs.
    pub fn spot_check_lipschitz(&self, pairs: usize, seed: SeedSpec) -> bool {
        let mut rng = seed.rng();
        let mut a = vec![0.0; self.m()];
        let mut b = vec![0.0; self.m()];
        for _ in 0..pairs {
            let u: Vec<f64> = (0..self.k).map(|_| rng.random_range(0.0..=self.radius)).collect();
            let w: Vec<f64> = (0..self.k).map(|_| rng.random_range(0.0..=self.radius)).collect();
            (self.t)(&u, &mut a);
            (self.t)(&w, &mut b);
            let dist = u.iter().zip(&w).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if worst > self.lipschitz * dist * (1.0 + 1e-12) + 1e-15 {
                return false;
            }
        }
        true
    }
}

/// `Q(u)` as a quadratic form.
pub fn family_eval(fam: &QFFamily, u: &[f64]) -> Result<QuadraticForm> {
    let t = fam.coefficients(u)?;
    let mut vt = fam.v.clone();
    for (j, tj) in t.iter().enumerate() {
        vt.column_mut(j).scale_mut(*tj);
    }
    QuadraticForm::new(vt * fam.v.transpose())
}

/// Grid estimate of `sup_u |ζᵀQ(u)ζ − tr Q(u)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupDeviation {
    pub value: f64,
    pub argmax: Vec<f64>,
    /// `L·R·√K/G · ‖VᵀV‖ · ‖ζ‖²`, a bound on the grid discretization error.
    pub grid_error_bound: f64,
}

/// Sufficient statistics of ζ for a family: `s = Vᵀζ` and the squared
/// column norms of V, so that `ζᵀQ(u)ζ = Σ tᵢ sᵢ²` and `tr Q(u) = Σ tᵢ cᵢ`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub s_sq: Vec<f64>,
    pub col_norms_sq: Vec<f64>,
}

impl QFFamily {
    pub fn project(&self, z: &[f64]) -> Result<Projection> {
        if z.len() != self.d() {
            return Err(Error::DimensionMismatch(format!("vector length {} vs d = {}", z.len(), self.d())));
        }
        let s = self.v.tr_mul(&DVector::from_column_slice(z));
        let col_norms_sq = self.v.column_iter().map(|c| c.norm_squared()).collect();
        Ok(Projection { s_sq: s.iter().map(|x| x * x).collect(), col_norms_sq })
    }
}

/// Uniform grid of `G` points per axis on `[0, R]`, endpoints included.
pub fn grid_axis(radius: f64, g: usize) -> Vec<f64> {
    (0..g).map(|j| radius * j as f64 / (g - 1) as f64).collect()
}

/// Maximum of `|Σ tᵢ(u)(sᵢ² − cᵢ)|` over the `G^K` grid.
pub fn sup_deviation_projected(fam: &QFFamily, proj: &Projection, g: usize) -> Result<(f64, Vec<f64>)> {
    if g < 2 {
        return Err(Error::InvalidParameter("grid needs G ≥ 2".into()));
    }
    if fam.k > 2 {
        return Err(Error::InvalidParameter(format!("K = {} > 2 would need a G^K grid", fam.k)));
    }
    let axis = grid_axis(fam.radius, g);
    let points: Vec<Vec<f64>> = if fam.k == 1 {
        axis.iter().map(|&a| vec![a]).collect()
    } else {
        axis.iter().flat_map(|&a| axis.iter().map(move |&b| vec![a, b])).collect()
    };
    let centred: Vec<f64> = proj.s_sq.iter().zip(&proj.col_norms_sq).map(|(s, c)| s - c).collect();
    let mut t = vec![0.0; fam.m()];
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for u in points {
        (fam.t)(&u, &mut t);
        let dev = t.iter().zip(&centred).map(|(a, b)| a * b).sum::<f64>().abs();
        if dev > best.0 {
            best = (dev, u);
        }
    }
    Ok(best)
}

/// Empirical surrogate for the uniform deviation of the family at `z`.
/// Coordinates of ζ are assumed to have unit variance, so
/// `E ζᵀQ(u)ζ = tr Q(u)`.
pub fn sup_deviation(fam: &QFFamily, z: &[f64], g: usize) -> Result<SupDeviation> {
    let proj = fam.project(z)?;
    let (value, argmax) = sup_deviation_projected(fam, &proj, g)?;
    let z_sq: f64 = z.iter().map(|x| x * x).sum();
    let grid_error_bound =
        fam.lipschitz * fam.radius * (fam.k as f64).sqrt() / g as f64 * fam.vtv_norm() * z_sq;
    Ok(SupDeviation { value, argmax, grid_error_bound })
}
