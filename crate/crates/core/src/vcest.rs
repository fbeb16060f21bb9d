//! Maximum-likelihood estimation of `θ = (σ², η²)` and the associated
//! score, Hessian and sandwich-covariance algebra.
//!
//! Everything is evaluated in the eigenbasis of `G = p⁻¹XXᵀ = UΛUᵀ`: with
//! `y̌ = Uᵀy` and `rᵢ = η²λᵢ + 1`, every resolvent reduces to an O(n) sum.

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qform::QuadraticForm;
use crate::randsrc::Moments;
use crate::remodel::ModelParams;
use crate::spectral::{eigvar, GramSpectrum};

/// Relative floor on `𝔳(Λ)/(λ₁+1)²` below which η² is not identifiable.
pub const IDENTIFIABILITY_FLOOR: f64 = 1e-10;
const SINGULAR_DET_FLOOR: f64 = 1e-12;

/// Rotated data `y̌ = Uᵀy` tied to its spectrum.
#[derive(Debug, Clone)]
pub struct ScoreState<'a> {
    spec: &'a GramSpectrum,
    y_check: Vec<f64>,
}

impl<'a> ScoreState<'a> {
    pub fn new(spec: &'a GramSpectrum, y: &[f64]) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response contains NaN or infinite entries".into()));
        }
        Ok(ScoreState { spec, y_check: spec.rotate(y)? })
    }

    /// Build directly from already-rotated data.
    pub fn from_rotated(spec: &'a GramSpectrum, y_check: Vec<f64>) -> Result<Self> {
        if y_check.len() != spec.n() {
            return Err(Error::DimensionMismatch(format!(
                "rotated vector has length {}, spectrum has n = {}",
                y_check.len(),
                spec.n()
            )));
        }
        Ok(ScoreState { spec, y_check })
    }

    pub fn spec(&self) -> &GramSpectrum {
        self.spec
    }

    pub fn y_check(&self) -> &[f64] {
        &self.y_check
    }

    /// Same spectrum, data multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        ScoreState { spec: self.spec, y_check: self.y_check.iter().map(|v| c * v).collect() }
    }

    fn sums(&self, eta_sq: f64) -> Sums {
        Sums::new(self.spec.lambdas(), |i| self.y_check[i] * self.y_check[i], eta_sq)
    }
}

/// Eigenbasis means at a given η², with `wᵢ` standing for `y̌ᵢ²` (or its
/// expectation) and `rᵢ = η²λᵢ + 1`.
#[derive(Debug, Clone, Copy)]
struct Sums {
    /// mean(w/r)
    s0: f64,
    /// mean(λw/r²)
    a: f64,
    /// mean(λ²w/r³)
    c: f64,
    /// mean(λ/r)
    b: f64,
    /// mean(λ²/r²)
    d: f64,
    /// mean(log r)
    logdet: f64,
}

impl Sums {
    fn new(lambdas: &[f64], w: impl Fn(usize) -> f64, eta_sq: f64) -> Self {
        let n = lambdas.len() as f64;
        let mut s = Sums { s0: 0.0, a: 0.0, c: 0.0, b: 0.0, d: 0.0, logdet: 0.0 };
        for (i, &l) in lambdas.iter().enumerate() {
            let r = eta_sq * l + 1.0;
            let wi = w(i);
            let q = l / r;
            s.s0 += wi / r;
            s.a += wi * q / r;
            s.c += wi * q * q / r;
            s.b += q;
            s.d += q * q;
            s.logdet += (eta_sq * l).ln_1p();
        }
        s.s0 /= n;
        s.a /= n;
        s.c /= n;
        s.b /= n;
        s.d /= n;
        s.logdet /= n;
        s
    }
}

fn population_sums(eta_sq: f64, params: &ModelParams, spec: &GramSpectrum) -> Sums {
    let l = spec.lambdas();
    Sums::new(l, |i| params.sigma0_sq * (params.eta0_sq * l[i] + 1.0), eta_sq)
}

fn check_eta(eta_sq: f64) -> Result<()> {
    if !(eta_sq.is_finite() && eta_sq >= 0.0) {
        return Err(Error::InvalidParameter(format!("η² must be finite and ≥ 0, got {eta_sq}")));
    }
    Ok(())
}

fn check_theta(theta: &ModelParams) -> Result<()> {
    if !(theta.sigma0_sq.is_finite() && theta.sigma0_sq > 0.0) {
        return Err(Error::InvalidParameter(format!("σ² must be > 0, got {}", theta.sigma0_sq)));
    }
    check_eta(theta.eta0_sq)
}

/// `σ*²(η²) = n⁻¹ Σ y̌ᵢ²/(η²λᵢ+1)`.
pub fn sigma_star_sq(state: &ScoreState, eta_sq: f64) -> Result<f64> {
    check_eta(eta_sq)?;
    Ok(state.sums(eta_sq).s0)
}

/// `σ₀²(η²) = (σ₀²/n) Σ (η₀²λᵢ+1)/(η²λᵢ+1)`.
pub fn sigma0_sq_of(eta_sq: f64, params: &ModelParams, spec: &GramSpectrum) -> Result<f64> {
    check_eta(eta_sq)?;
    Ok(population_sums(eta_sq, params, spec).s0)
}

/// Gaussian log-likelihood per observation, up to the additive constant.
pub fn loglik(state: &ScoreState, theta: &ModelParams) -> Result<f64> {
    check_theta(theta)?;
    let s = state.sums(theta.eta0_sq);
    Ok(-0.5 * theta.sigma0_sq.ln() - 0.5 * s.logdet - s.s0 / (2.0 * theta.sigma0_sq))
}

fn profile_from_sums(s: &Sums) -> f64 {
    -0.5 * s.s0.ln() - 0.5 * s.logdet - 0.5
}

/// `ℓ*(η²) = ℓ(σ*²(η²), η²)`.
pub fn profile_loglik(state: &ScoreState, eta_sq: f64) -> Result<f64> {
    check_eta(eta_sq)?;
    Ok(profile_from_sums(&state.sums(eta_sq)))
}

/// Population profile `ℓ₀(η²) = −½log σ₀²(η²) − (1/2n)Σlog(η²λᵢ+1) − ½log σ₀² − ½`.
pub fn pop_profile_loglik(eta_sq: f64, params: &ModelParams, spec: &GramSpectrum) -> Result<f64> {
    check_eta(eta_sq)?;
    let s = population_sums(eta_sq, params, spec);
    Ok(-0.5 * s.s0.ln() - 0.5 * s.logdet - 0.5 * params.sigma0_sq.ln() - 0.5)
}

/// `H*(η²) = n⁻¹Σλᵢy̌ᵢ²/rᵢ² − σ*²(η²)·n⁻¹Σλᵢ/rᵢ`, which equals
/// `2σ*²(η²)·dℓ*/dη²`.
pub fn profile_score(state: &ScoreState, eta_sq: f64) -> Result<f64> {
    check_eta(eta_sq)?;
    let s = state.sums(eta_sq);
    Ok(s.a - s.s0 * s.b)
}

/// `(H*(η²), dH*/dη²)`.
fn profile_score_and_slope(state: &ScoreState, eta_sq: f64) -> (f64, f64) {
    let s = state.sums(eta_sq);
    (s.a - s.s0 * s.b, -2.0 * s.c + s.a * s.b + s.s0 * s.d)
}

/// Population profile score `H₀(η²)`, evaluated from first moments.
pub fn pop_profile_score(eta_sq: f64, params: &ModelParams, spec: &GramSpectrum) -> Result<f64> {
    check_eta(eta_sq)?;
    let s = population_sums(eta_sq, params, spec);
    Ok(s.a - s.s0 * s.b)
}

/// `H₀(η²)` as the pairwise sum
/// `(σ₀²/2n²) ΣᵢΣⱼ (η₀²−η²)(λᵢ−λⱼ)²/(rᵢ²rⱼ²)`. O(n²).
pub fn pop_profile_score_pairwise(eta_sq: f64, params: &ModelParams, spec: &GramSpectrum) -> Result<f64> {
    check_eta(eta_sq)?;
    let l = spec.lambdas();
    let n = l.len() as f64;
    let r2: Vec<f64> = l.iter().map(|x| (eta_sq * x + 1.0).powi(2)).collect();
    let mut total = 0.0;
    for i in 0..l.len() {
        for j in (i + 1)..l.len() {
            total += (l[i] - l[j]).powi(2) / (r2[i] * r2[j]);
        }
    }
    // each unordered pair appears twice in the full double sum
    Ok(params.sigma0_sq * (params.eta0_sq - eta_sq) * total / (n * n))
}

/// The score `S(θ) = ∇ℓ(θ)`.
pub fn score(state: &ScoreState, theta: &ModelParams) -> Result<[f64; 2]> {
    check_theta(theta)?;
    let s = state.sums(theta.eta0_sq);
    Ok(score_from_sums(&s, theta.sigma0_sq))
}

fn score_from_sums(s: &Sums, sigma_sq: f64) -> [f64; 2] {
    let s4 = sigma_sq * sigma_sq;
    [s.s0 / (2.0 * s4) - 1.0 / (2.0 * sigma_sq), s.a / (2.0 * sigma_sq) - 0.5 * s.b]
}

fn hessian_from_sums(s: &Sums, sigma_sq: f64) -> Matrix2<f64> {
    let s4 = sigma_sq * sigma_sq;
    let j11 = 1.0 / (2.0 * s4) - s.s0 / (s4 * sigma_sq);
    let j12 = -s.a / (2.0 * s4);
    let j22 = 0.5 * s.d - s.c / sigma_sq;
    Matrix2::new(j11, j12, j12, j22)
}

/// The Hessian `J(θ) = ∇²ℓ(θ)`.
pub fn hessian(state: &ScoreState, theta: &ModelParams) -> Result<Matrix2<f64>> {
    check_theta(theta)?;
    Ok(hessian_from_sums(&state.sums(theta.eta0_sq), theta.sigma0_sq))
}

/// `J₀(θ) = E{J(θ) | X}` under true parameters `params`.
pub fn expected_hessian(theta: &ModelParams, params: &ModelParams, spec: &GramSpectrum) -> Result<Matrix2<f64>> {
    check_theta(theta)?;
    check_theta(params)?;
    Ok(hessian_from_sums(&population_sums(theta.eta0_sq, params, spec), theta.sigma0_sq))
}

/// Gaussian Fisher information `𝓘_N(θ₀)` for one observation's worth of
/// likelihood, so that `J₀(θ₀) = −𝓘_N(θ₀)`.
pub fn gaussian_fisher(params: &ModelParams, spec: &GramSpectrum) -> Result<Matrix2<f64>> {
    check_theta(params)?;
    let s = Sums::new(spec.lambdas(), |_| 0.0, params.eta0_sq);
    let s2 = params.sigma0_sq;
    let i11 = 1.0 / (2.0 * s2 * s2);
    let i12 = s.b / (2.0 * s2);
    let i22 = 0.5 * s.d;
    Ok(Matrix2::new(i11, i12, i12, i22))
}

/// Moments of the standardized effect and error coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectLaws {
    pub beta: Moments,
    pub eps: Moments,
}

impl EffectLaws {
    pub fn same(m: Moments) -> Self {
        EffectLaws { beta: m, eps: m }
    }
}

/// Quadratic-form representation of the score at θ₀:
/// `S_k(θ₀) = ζᵀM_kζ − c_k` with `ζ = (√p·β/τ₀, ε/σ₀)`.
#[derive(Debug, Clone)]
pub struct ScoreQuadraticForms {
    pub m1: QuadraticForm,
    pub m2: QuadraticForm,
    pub c1: f64,
    pub c2: f64,
}

/// Resolvent weights `a₁ = 1/(2σ₀⁴n·r)`, `a₂ = λ/(2σ₀²n·r²)` such that
/// `M_k = BᵀU·diag(a_k)·UᵀB`.
fn score_weights(params: &ModelParams, spec: &GramSpectrum) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = spec.n() as f64;
    let s2 = params.sigma0_sq;
    let r: Vec<f64> = spec.lambdas().iter().map(|l| params.eta0_sq * l + 1.0).collect();
    let a1 = r.iter().map(|ri| 1.0 / (2.0 * s2 * s2 * n * ri)).collect();
    let a2 = spec.lambdas().iter().zip(&r).map(|(l, ri)| l / (2.0 * s2 * n * ri * ri)).collect();
    (a1, a2, r)
}

fn check_design(spec: &GramSpectrum, x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != spec.n() || x.ncols() != spec.p() {
        return Err(Error::DimensionMismatch(format!(
            "design is {}×{}, spectrum is for {}×{}",
            x.nrows(),
            x.ncols(),
            spec.n(),
            spec.p()
        )));
    }
    Ok(())
}

/// `UᵀB` with `B = [τ₀/√p·X, σ₀I]`, so that `y = Bζ`.
fn rotated_loading(params: &ModelParams, spec: &GramSpectrum, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = (spec.n(), spec.p());
    let u = spec.eigenvectors();
    let mut w = DMatrix::zeros(n, n + p);
    let beta_scale = params.tau0_sq().sqrt() / (p as f64).sqrt();
    w.columns_mut(0, p).copy_from(&(u.tr_mul(x) * beta_scale));
    w.columns_mut(p, n).copy_from(&(u.transpose() * params.sigma0_sq.sqrt()));
    w
}

pub fn score_qf_matrices(params: &ModelParams, spec: &GramSpectrum, x: &DMatrix<f64>) -> Result<ScoreQuadraticForms> {
    check_theta(params)?;
    if params.eta0_sq <= 0.0 {
        return Err(Error::InvalidParameter("score quadratic forms need η₀² > 0".into()));
    }
    check_design(spec, x)?;
    let (a1, a2, _) = score_weights(params, spec);
    let w = rotated_loading(params, spec, x);
    let weighted = |a: &[f64]| {
        let mut aw = w.clone();
        for (i, ai) in a.iter().enumerate() {
            aw.row_mut(i).scale_mut(*ai);
        }
        w.tr_mul(&aw)
    };
    let s = Sums::new(spec.lambdas(), |_| 0.0, params.eta0_sq);
    Ok(ScoreQuadraticForms {
        m1: QuadraticForm::new(weighted(&a1))?,
        m2: QuadraticForm::new(weighted(&a2))?,
        c1: 1.0 / (2.0 * params.sigma0_sq),
        c2: 0.5 * s.b,
    })
}

/// Standardized coordinates `ζ = (√p·β/τ₀, ε/σ₀)`.
pub fn standardized_coordinates(params: &ModelParams, beta: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    let tau = params.tau0_sq().sqrt();
    if tau <= 0.0 {
        return Err(Error::InvalidParameter("standardizing β needs τ₀² > 0".into()));
    }
    let sp = (beta.len() as f64).sqrt();
    let sd = params.sigma0_sq.sqrt();
    Ok(beta.iter().map(|b| sp * b / tau).chain(eps.iter().map(|e| e / sd)).collect())
}

/// Score information `𝓘(θ₀) = Var{√n·S(θ₀) | X}`.
///
/// The excess-kurtosis correction needs the design; `x` may be omitted when
/// both laws have μ4 = 3.
pub fn score_covariance(
    params: &ModelParams,
    spec: &GramSpectrum,
    x: Option<&DMatrix<f64>>,
    laws: &EffectLaws,
) -> Result<Matrix2<f64>> {
    check_theta(params)?;
    for m in [laws.beta, laws.eps] {
        if m.mu3 != 0.0 {
            return Err(Error::UnsupportedLaw(format!("score covariance needs μ3 = 0, got {}", m.mu3)));
        }
        if m.mu4 < 1.0 {
            return Err(Error::InvalidParameter(format!("fourth moment {} < 1", m.mu4)));
        }
    }
    let n = spec.n();
    let (a1, a2, r) = score_weights(params, spec);
    let s4 = params.sigma0_sq * params.sigma0_sq;
    // tr(M_a M_b) = σ₀⁴ Σ aᵢbᵢrᵢ² because BBᵀ = σ₀²R₀
    let tr = |a: &[f64], b: &[f64]| s4 * a.iter().zip(b).zip(&r).map(|((x, y), ri)| x * y * ri * ri).sum::<f64>();
    let mut cov = Matrix2::new(2.0 * tr(&a1, &a1), 2.0 * tr(&a1, &a2), 0.0, 2.0 * tr(&a2, &a2));

    let kurt_beta = laws.beta.mu4 - 3.0;
    let kurt_eps = laws.eps.mu4 - 3.0;
    if kurt_beta != 0.0 || kurt_eps != 0.0 {
        let x = x.ok_or_else(|| Error::InvalidParameter("non-Gaussian score covariance needs the design".into()))?;
        check_design(spec, x)?;
        let p = spec.p();
        let w = rotated_loading(params, spec, x);
        let mut k11 = 0.0;
        let mut k12 = 0.0;
        let mut k22 = 0.0;
        for (k, col) in w.column_iter().enumerate() {
            let kurt = if k < p { kurt_beta } else { kurt_eps };
            if kurt == 0.0 {
                continue;
            }
            let mut d1 = 0.0;
            let mut d2 = 0.0;
            for (i, wik) in col.iter().enumerate() {
                let sq = wik * wik;
                d1 += a1[i] * sq;
                d2 += a2[i] * sq;
            }
            k11 += kurt * d1 * d1;
            k12 += kurt * d1 * d2;
            k22 += kurt * d2 * d2;
        }
        cov[(0, 0)] += k11;
        cov[(0, 1)] += k12;
        cov[(1, 1)] += k22;
    }
    cov[(1, 0)] = cov[(0, 1)];
    Ok(cov * n as f64)
}

fn invert_checked(j: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let det = j.determinant();
    if !(det.abs() > SINGULAR_DET_FLOOR * j.norm_squared()) {
        return Err(Error::Singular(format!("expected Hessian is singular (det = {det:e})")));
    }
    j.try_inverse().ok_or_else(|| Error::Singular("expected Hessian is singular".into()))
}

fn symmetrize(m: Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

/// Sandwich covariance `Ψ = J₀⁻¹𝓘J₀⁻¹` of `√n(θ̂ − θ₀)`.
pub fn asymptotic_cov(
    params: &ModelParams,
    spec: &GramSpectrum,
    x: Option<&DMatrix<f64>>,
    laws: &EffectLaws,
) -> Result<Matrix2<f64>> {
    let j0 = expected_hessian(params, params, spec)?;
    let jinv = invert_checked(&j0)?;
    let info = score_covariance(params, spec, x, laws)?;
    Ok(symmetrize(jinv * info * jinv))
}

/// True when `𝔳(Λ)` is too small relative to `(λ₁+1)²` to separate σ² and η².
pub fn is_identifiable(spec: &GramSpectrum) -> bool {
    eigvar(spec) >= IDENTIFIABILITY_FLOOR * (spec.lambda_max() + 1.0).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Grid size on `t = η²/(1+η²)`.
    pub grid: usize,
    /// Final bracket width of the golden-section search, in t.
    pub golden_tol: f64,
    pub newton_max_iters: usize,
    /// Upper end of the t search interval.
    pub t_cap: f64,
    pub keep_trace: bool,
    pub compute_psi: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { grid: 64, golden_tol: 1e-8, newton_max_iters: 20, t_cap: 1.0 - 1e-6, keep_trace: true, compute_psi: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: ModelParams,
    /// `(η², ℓ*(η²))` on the search grid.
    pub eta_grid_trace: Vec<(f64, f64)>,
    /// η̂² = 0 on the boundary of the parameter space.
    pub boundary_flag: bool,
    /// Set when the spectrum is too flat to identify η².
    pub identifiability_flag: bool,
    /// The maximizer sits at the η² search cap.
    pub capped_flag: bool,
    pub newton_iters: usize,
    pub profile_score_at_hat: f64,
    pub tol_score: f64,
    /// Plug-in `𝓘_N(θ̂)⁻¹`.
    pub psi_hat: Option<Matrix2<f64>>,
}

#[derive(Serialize)]
struct FitJson<'a> {
    sigma2_hat: f64,
    eta2_hat: f64,
    boundary: bool,
    identifiable: bool,
    capped: bool,
    newton_iters: usize,
    psi: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a [(f64, f64)]>,
}

impl FitResult {
    pub fn to_json(&self, with_trace: bool) -> Result<String> {
        let j = FitJson {
            sigma2_hat: self.theta_hat.sigma0_sq,
            eta2_hat: self.theta_hat.eta0_sq,
            boundary: self.boundary_flag,
            identifiable: !self.identifiability_flag,
            capped: self.capped_flag,
            newton_iters: self.newton_iters,
            psi: self.psi_hat.map(|m| [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]),
            trace: with_trace.then_some(self.eta_grid_trace.as_slice()),
        };
        Ok(serde_json::to_string_pretty(&j)? + "\n")
    }
}

fn eta_of_t(t: f64) -> f64 {
    t / (1.0 - t)
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Maximize `f` on `[lo, hi]` by golden-section search.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        // ties move left, toward the smaller maximizer
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Maximum-likelihood fit of `(σ², η²)`.
///
/// ℓ* is evaluated on a grid in `t = η²/(1+η²)`, the best cell is refined
/// by golden-section search and the root of H* is polished by safeguarded
/// Newton steps. Exact ties on the grid resolve to the smallest η².
pub fn fit_mle(state: &ScoreState, opts: &FitOptions) -> Result<FitResult> {
    let spec = state.spec();
    if spec.n() < 2 {
        return Err(Error::InvalidParameter("fitting needs n ≥ 2".into()));
    }
    if opts.grid < 3 || !(opts.t_cap > 0.0 && opts.t_cap < 1.0) || !(opts.golden_tol > 0.0) {
        return Err(Error::InvalidParameter("fit options need grid ≥ 3, 0 < t_cap < 1, golden_tol > 0".into()));
    }
    let energy: f64 = state.y_check().iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::DegenerateData("response is identically zero, σ̂² = 0".into()));
    }
    let identifiability_flag = !is_identifiable(spec);
    let prof = |eta: f64| profile_from_sums(&state.sums(eta));

    let g = opts.grid;
    let ts: Vec<f64> = (0..g).map(|j| opts.t_cap * j as f64 / (g - 1) as f64).collect();
    let mut trace = Vec::with_capacity(g);
    let mut best = 0;
    for (j, &t) in ts.iter().enumerate() {
        let eta = eta_of_t(t);
        let v = prof(eta);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("profile log-likelihood at η² = {eta}")));
        }
        if v > trace.get(best).map_or(f64::NEG_INFINITY, |&(_, b)| b) {
            best = j;
        }
        trace.push((eta, v));
    }

    let h0 = profile_score_and_slope(state, 0.0).0;
    let tol_score = 1e-8 * (1.0 + h0.abs());
    let mut newton_iters = 0;
    let eta_hat = if identifiability_flag {
        // flat profile: take the smallest grid point that is numerically maximal
        let top = trace[best].1;
        let slack = 1e-10 * (1.0 + top.abs());
        trace.iter().find(|(_, v)| *v >= top - slack).map_or(0.0, |&(e, _)| e)
    } else if best == 0 && h0 <= 0.0 {
        0.0
    } else {
        let t_lo = ts[best.saturating_sub(1)];
        let t_hi = ts[(best + 1).min(g - 1)];
        let t_gold = golden_max(|t| prof(eta_of_t(t)), t_lo, t_hi, opts.golden_tol);
        let eta_gold = eta_of_t(t_gold);
        let (mut lo, mut hi) = (eta_of_t(t_lo), eta_of_t(t_hi));
        let mut x = eta_gold;
        for _ in 0..opts.newton_max_iters {
            let (h, dh) = profile_score_and_slope(state, x);
            if h == 0.0 {
                break;
            }
            if h > 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let step = if dh < 0.0 { x - h / dh } else { f64::NAN };
            let next = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
            newton_iters += 1;
            // polish to machine precision rather than stopping at tol_score,
            // which is not invariant to rescaling y
            let converged = (next - x).abs() <= 4.0 * f64::EPSILON * (1.0 + x);
            x = next;
            if converged {
                break;
            }
        }
        let ref_val = prof(eta_gold);
        if prof(x) < ref_val - 1e-12 * (1.0 + ref_val.abs()) {
            eta_gold
        } else {
            x
        }
    };

    let eta_cap = eta_of_t(opts.t_cap);
    let sigma_hat = state.sums(eta_hat).s0;
    let theta_hat = ModelParams { sigma0_sq: sigma_hat, eta0_sq: eta_hat };
    let psi_hat = if opts.compute_psi && !identifiability_flag {
        gaussian_fisher(&theta_hat, spec).ok().and_then(|i| invert_checked(&i).ok()).map(symmetrize)
    } else {
        None
    };
    Ok(FitResult {
        theta_hat,
        eta_grid_trace: if opts.keep_trace { trace } else { Vec::new() },
        boundary_flag: eta_hat == 0.0,
        identifiability_flag,
        capped_flag: !identifiability_flag && eta_hat >= eta_cap * (1.0 - 1e-9),
        newton_iters,
        profile_score_at_hat: profile_score_and_slope(state, eta_hat).0,
        tol_score,
        psi_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randsrc::{SeedSpec, SubGaussianLaw};
    use crate::remodel::{gen_design, gen_independent, Design};
    use crate::spectral::{chi, decompose_gram};
    use nalgebra::DVector;
    use rand::Rng;

    fn mp(s: f64, e: f64) -> ModelParams {
        ModelParams::new(s, e).unwrap()
    }

    fn random_spectrum(n: usize, seed: u64) -> GramSpectrum {
        let mut rng = SeedSpec::new(seed, 0).rng();
        let mut l: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        l.sort_by(|a, b| b.total_cmp(a));
        GramSpectrum::from_eigenvalues(l, 2 * n).unwrap()
    }

    fn problem(n: usize, p: usize, params: ModelParams, seed: u64) -> (DMatrix<f64>, GramSpectrum, Vec<f64>) {
        let x = gen_design(n, p, &Design::GaussianIid, SeedSpec::new(seed, 0)).unwrap();
        let spec = decompose_gram(&x).unwrap();
        let g = SubGaussianLaw::GAUSSIAN;
        let d = gen_independent(&x, params, g, g, SeedSpec::new(seed, 1)).unwrap();
        (x, spec, d.y)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-8)
    }

    #[test]
    fn rotation_preserves_norm() {
        let (_, spec, y) = problem(20, 30, mp(1.0, 1.0), 1);
        let st = ScoreState::new(&spec, &y).unwrap();
        let a: f64 = y.iter().map(|v| v * v).sum();
        let b: f64 = st.y_check().iter().map(|v| v * v).sum();
        assert!((a.sqrt() - b.sqrt()).abs() < 1e-10 * a.sqrt());
    }

    #[test]
    fn sigma_star_examples_and_dense_oracle() {
        let (x, spec, y) = problem(12, 8, mp(1.0, 2.0), 2);
        let st = ScoreState::new(&spec, &y).unwrap();
        let norm_sq: f64 = y.iter().map(|v| v * v).sum();
        assert!(rel(sigma_star_sq(&st, 0.0).unwrap(), norm_sq / 12.0) < 1e-12);

        for eta in [0.3, 1.0, 7.5] {
            let r = &x * x.transpose() * (eta / 8.0) + DMatrix::identity(12, 12);
            let sol = r.lu().solve(&DVector::from_column_slice(&y)).unwrap();
            let dense = DVector::from_column_slice(&y).dot(&sol) / 12.0;
            assert!(rel(sigma_star_sq(&st, eta).unwrap(), dense) < 1e-8);
        }
        // n0 = 8 < n = 12: limit keeps only the null-space energy
        let tail: f64 = st.y_check()[8..].iter().map(|v| v * v).sum::<f64>() / 12.0;
        assert!(rel(sigma_star_sq(&st, 1e12).unwrap(), tail) < 1e-6);
    }

    #[test]
    fn population_sigma_examples() {
        let spec = random_spectrum(15, 3);
        let pr = mp(1.7, 0.6);
        assert!((sigma0_sq_of(0.6, &pr, &spec).unwrap() - 1.7).abs() < 1e-12);
        let mean_l = spec.lambdas().iter().sum::<f64>() / 15.0;
        assert!(rel(sigma0_sq_of(0.0, &pr, &spec).unwrap(), 1.7 * (1.0 + 0.6 * mean_l)) < 1e-12);
        let flat = GramSpectrum::from_eigenvalues(vec![2.0; 5], 5).unwrap();
        assert!(rel(sigma0_sq_of(3.0, &pr, &flat).unwrap(), 1.7 * 2.2 / 7.0) < 1e-12);
    }

    #[test]
    fn loglik_examples() {
        let (_, spec, y) = problem(10, 20, mp(1.0, 1.0), 4);
        let st = ScoreState::new(&spec, &y).unwrap();
        let s0 = y.iter().map(|v| v * v).sum::<f64>() / 10.0;
        let l = loglik(&st, &mp(s0, 0.0)).unwrap();
        assert!((l - (-0.5 * s0.ln() - 0.5)).abs() < 1e-12);
        for k in 0..20 {
            let eta = 0.25 * k as f64;
            let s = sigma_star_sq(&st, eta).unwrap();
            let a = loglik(&st, &mp(s, eta)).unwrap();
            let b = profile_loglik(&st, eta).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        assert!(loglik(&st, &ModelParams { sigma0_sq: 0.0, eta0_sq: 1.0 }).is_err());
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6 * (1.0 + x.abs());
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn derivative_consistency() {
        for seed in 0..10 {
            let (_, spec, y) = problem(15, 25, mp(1.3, 0.8), 10 + seed);
            let st = ScoreState::new(&spec, &y).unwrap();
            let th = mp(0.9 + 0.1 * seed as f64, 0.4 + 0.2 * seed as f64);
            let s = score(&st, &th).unwrap();
            let fd1 = central(|v| loglik(&st, &mp(v, th.eta0_sq)).unwrap(), th.sigma0_sq);
            let fd2 = central(|v| loglik(&st, &mp(th.sigma0_sq, v)).unwrap(), th.eta0_sq);
            assert!((s[0] - fd1).abs() <= 1e-6 * s[0].abs().max(1e-3));
            assert!((s[1] - fd2).abs() <= 1e-6 * s[1].abs().max(1e-3));

            let j = hessian(&st, &th).unwrap();
            assert_eq!(j[(0, 1)], j[(1, 0)]);
            let d1 = |v: f64| score(&st, &mp(v, th.eta0_sq)).unwrap();
            let d2 = |v: f64| score(&st, &mp(th.sigma0_sq, v)).unwrap();
            let fd = [
                [central(|v| d1(v)[0], th.sigma0_sq), central(|v| d2(v)[0], th.eta0_sq)],
                [central(|v| d1(v)[1], th.sigma0_sq), central(|v| d2(v)[1], th.eta0_sq)],
            ];
            for a in 0..2 {
                for b in 0..2 {
                    assert!((j[(a, b)] - fd[a][b]).abs() <= 1e-5 * j[(a, b)].abs().max(1e-3));
                }
            }

            let eta = th.eta0_sq;
            let h = profile_score(&st, eta).unwrap();
            let fd = 2.0 * sigma_star_sq(&st, eta).unwrap() * central(|v| profile_loglik(&st, v).unwrap(), eta);
            assert!((h - fd).abs() <= 1e-6 * h.abs().max(1e-4));
            let (_, dh) = profile_score_and_slope(&st, eta);
            let fd_slope = central(|v| profile_score(&st, v).unwrap(), eta);
            assert!((dh - fd_slope).abs() <= 1e-5 * dh.abs().max(1e-3));
        }
    }

    #[test]
    fn flat_spectrum_degeneracies() {
        let flat = GramSpectrum::from_eigenvalues(vec![1.5; 6], 6).unwrap();
        let pr = mp(1.0, 2.0);
        let st = ScoreState::from_rotated(&flat, vec![0.3, -1.0, 2.0, 0.1, 0.7, -0.4]).unwrap();
        for eta in [0.0, 0.5, 3.0] {
            assert!(profile_score(&st, eta).unwrap().abs() < 1e-14);
            assert_eq!(pop_profile_score(eta, &pr, &flat).unwrap().abs() < 1e-14, true);
            let l0 = pop_profile_loglik(eta, &pr, &flat).unwrap();
            assert!((l0 - pop_profile_loglik(0.0, &pr, &flat).unwrap()).abs() < 1e-12);
        }
        let j0 = expected_hessian(&pr, &pr, &flat).unwrap();
        assert!(j0.determinant().abs() < 1e-14);
        assert!(matches!(asymptotic_cov(&pr, &flat, None, &EffectLaws::same(SubGaussianLaw::GAUSSIAN.moments())), Err(Error::Singular(_))));
    }

    #[test]
    fn pop_score_examples() {
        let spec = GramSpectrum::from_eigenvalues(vec![2.0, 0.0], 2).unwrap();
        let pr = mp(1.0, 1.0);
        assert!((pop_profile_score(0.0, &pr, &spec).unwrap() - 1.0).abs() < 1e-14);
        assert!((pop_profile_score_pairwise(0.0, &pr, &spec).unwrap() - 1.0).abs() < 1e-14);
        assert!(pop_profile_score(1.0, &pr, &spec).unwrap().abs() < 1e-15);
        let j0 = expected_hessian(&pr, &pr, &spec).unwrap();
        assert!((j0.determinant() - 1.0 / 36.0).abs() < 1e-14);
    }

    #[test]
    fn pop_score_forms_agree_and_bound() {
        for seed in 0..30 {
            let spec = random_spectrum(12, 100 + seed);
            let mut rng = SeedSpec::new(seed, 9).rng();
            let pr = mp(rng.random_range(0.2..3.0), rng.random_range(0.0..3.0));
            let v = eigvar(&spec);
            for eta in [0.0, 0.3, 1.0, 2.5, 6.0] {
                let a = pop_profile_score(eta, &pr, &spec).unwrap();
                let b = pop_profile_score_pairwise(eta, &pr, &spec).unwrap();
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
                let lower = pr.sigma0_sq * (pr.eta0_sq - eta).abs() * v / (eta * spec.lambda_max() + 1.0).powi(4);
                assert!(b.abs() >= lower * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn population_profile_curvature() {
        let mut rng = SeedSpec::new(5, 5).rng();
        let mut l: Vec<f64> = (0..10).map(|_| rng.random_range(0.2..3.0)).collect();
        l.sort_by(|a, b| b.total_cmp(a));
        let spec = GramSpectrum::from_eigenvalues(l, 20).unwrap();
        assert_eq!(spec.n0(), 10);
        let pr = mp(1.2, 0.7);
        let top = pop_profile_loglik(0.7, &pr, &spec).unwrap();
        let c = chi(0.7, &spec).unwrap() * eigvar(&spec);
        for k in 0..200 {
            let eta = 0.05 * k as f64;
            let gap = top - pop_profile_loglik(eta, &pr, &spec).unwrap();
            let dev = eta - 0.7;
            assert!(gap >= -1e-14);
            assert!(gap >= dev * dev * c / (dev.abs() + 1.0).powi(2) - 1e-14);
        }
    }

    #[test]
    fn expected_hessian_identities() {
        for seed in 0..20 {
            let spec = random_spectrum(9, 300 + seed);
            let mut rng = SeedSpec::new(seed, 1).rng();
            let pr = mp(rng.random_range(0.3..2.0), rng.random_range(0.1..2.0));
            let j0 = expected_hessian(&pr, &pr, &spec).unwrap();
            let fisher = gaussian_fisher(&pr, &spec).unwrap();
            assert!((j0 + fisher).amax() < 1e-12 * fisher.amax());
            let l = spec.lambdas();
            let r2: Vec<f64> = l.iter().map(|x| (pr.eta0_sq * x + 1.0).powi(2)).collect();
            let mut dbl = 0.0;
            for i in 0..9 {
                for j in 0..9 {
                    dbl += (l[i] - l[j]).powi(2) / (r2[i] * r2[j]);
                }
            }
            let s4 = pr.sigma0_sq.powi(2);
            dbl /= 8.0 * s4 * 81.0;
            assert!((j0.determinant() - dbl).abs() <= 1e-10 * dbl.max(1e-12));
            let lower = eigvar(&spec)
                / (4.0 * s4 * (pr.eta0_sq + 1.0).powi(4) * (spec.lambda_max() + 1.0).powi(4));
            assert!(j0.determinant() >= lower);
        }
    }

    #[test]
    fn monte_carlo_score_and_hessian_means() {
        let (x, spec, _) = problem(6, 10, mp(1.0, 1.0), 7);
        let pr = mp(1.4, 0.9);
        let g = SubGaussianLaw::GAUSSIAN;
        let reps = 10_000;
        let mut s = Vec::with_capacity(reps);
        let mut h = Vec::with_capacity(reps);
        for r in 0..reps {
            let d = gen_independent(&x, pr, g, SubGaussianLaw::UNIFORM, SeedSpec::new(70, r as u64)).unwrap();
            let st = ScoreState::new(&spec, &d.y).unwrap();
            s.push(score(&st, &pr).unwrap());
            h.push(hessian(&st, &pr).unwrap());
        }
        let mean_se = |v: Vec<f64>| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            (m, sd / n.sqrt())
        };
        for k in 0..2 {
            let (m, se) = mean_se(s.iter().map(|v| v[k]).collect());
            assert!(m.abs() <= 5.0 * se, "score {k}: {m} ± {se}");
        }
        let j0 = expected_hessian(&pr, &pr, &spec).unwrap();
        for (a, b) in [(0, 0), (0, 1), (1, 1)] {
            let (m, se) = mean_se(h.iter().map(|j| j[(a, b)]).collect());
            assert!((m - j0[(a, b)]).abs() <= 5.0 * se, "J[{a},{b}]: {m} vs {}", j0[(a, b)]);
        }
    }

    #[test]
    fn score_as_quadratic_forms() {
        let pr = mp(1.3, 0.7);
        let (x, spec, _) = problem(7, 11, mp(1.0, 1.0), 8);
        let qf = score_qf_matrices(&pr, &spec, &x).unwrap();
        assert!((qf.m1.trace() - qf.c1).abs() < 1e-12);
        assert!((qf.m2.trace() - qf.c2).abs() < 1e-12);
        let bound = (pr.sigma0_sq + 1.0) * (pr.eta0_sq + 1.0) * (spec.lambda_max() + 1.0).powi(2)
            / (2.0 * pr.sigma0_sq * 7.0);
        assert!(qf.m1.op_norm() <= bound && qf.m2.op_norm() <= bound);
        for r in 0..100 {
            let d = gen_independent(&x, pr, SubGaussianLaw::RADEMACHER, SubGaussianLaw::GAUSSIAN, SeedSpec::new(80, r))
                .unwrap();
            let z = standardized_coordinates(&pr, &d.beta_true, &d.eps_true).unwrap();
            let st = ScoreState::new(&spec, &d.y).unwrap();
            let s = score(&st, &pr).unwrap();
            let q1 = crate::qform::eval_qf(&qf.m1, &z).unwrap() - qf.c1;
            let q2 = crate::qform::eval_qf(&qf.m2, &z).unwrap() - qf.c2;
            assert!((s[0] - q1).abs() < 1e-8 && (s[1] - q2).abs() < 1e-8);
        }
        assert!(score_qf_matrices(&mp(1.0, 0.0), &spec, &x).is_err());
    }

    #[test]
    fn score_covariance_structured_matches_dense() {
        use crate::qform::{qf_covariance, CoordMoments};
        let pr = mp(0.8, 1.6);
        let (x, spec, _) = problem(8, 5, mp(1.0, 1.0), 9);
        let qf = score_qf_matrices(&pr, &spec, &x).unwrap();
        for (bl, el) in [
            (SubGaussianLaw::UNIFORM, SubGaussianLaw::RADEMACHER),
            (SubGaussianLaw::RADEMACHER, SubGaussianLaw::GAUSSIAN),
            (SubGaussianLaw::GAUSSIAN, SubGaussianLaw::GAUSSIAN),
        ] {
            let laws = EffectLaws { beta: bl.moments(), eps: el.moments() };
            let fast = score_covariance(&pr, &spec, Some(&x), &laws).unwrap();
            let cm = CoordMoments::blocks(bl.moments(), 5, el.moments(), 13);
            let n = 8.0;
            let dense = Matrix2::new(
                qf_covariance(&qf.m1, &qf.m1, &cm).unwrap(),
                qf_covariance(&qf.m1, &qf.m2, &cm).unwrap(),
                qf_covariance(&qf.m2, &qf.m1, &cm).unwrap(),
                qf_covariance(&qf.m2, &qf.m2, &cm).unwrap(),
            ) * n;
            assert!((fast - dense).amax() <= 1e-10 * dense.amax());
            assert!(fast.symmetric_eigenvalues().min() >= -1e-10);
        }
        let gl = EffectLaws::same(SubGaussianLaw::GAUSSIAN.moments());
        let gaussian = score_covariance(&pr, &spec, None, &gl).unwrap();
        let fisher = gaussian_fisher(&pr, &spec).unwrap();
        assert!((gaussian - fisher).amax() <= 1e-8 * fisher.amax());
        let ul = EffectLaws::same(SubGaussianLaw::UNIFORM.moments());
        assert!(score_covariance(&pr, &spec, None, &ul).is_err());
    }

    #[test]
    fn score_covariance_monte_carlo() {
        let pr = mp(1.0, 1.5);
        let (x, spec, _) = problem(5, 4, mp(1.0, 1.0), 12);
        let (bl, el) = (SubGaussianLaw::UNIFORM, SubGaussianLaw::RADEMACHER);
        let info = score_covariance(&pr, &spec, Some(&x), &EffectLaws { beta: bl.moments(), eps: el.moments() }).unwrap();
        let reps = 100_000;
        let scores: Vec<[f64; 2]> = (0..reps)
            .map(|r| {
                let d = gen_independent(&x, pr, bl, el, SeedSpec::new(90, r)).unwrap();
                score(&ScoreState::new(&spec, &d.y).unwrap(), &pr).unwrap()
            })
            .collect();
        let n = 5.0;
        for (a, b) in [(0, 0), (0, 1), (1, 1)] {
            // E S = 0 exactly, so the raw product is unbiased for the covariance
            let prods: Vec<f64> = scores.iter().map(|s| n * s[a] * s[b]).collect();
            let m = prods.iter().sum::<f64>() / reps as f64;
            let sd = (prods.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps as f64 - 1.0)).sqrt();
            let se = sd / (reps as f64).sqrt();
            assert!((m - info[(a, b)]).abs() <= 5.0 * se, "({a},{b}): {m} vs {} ± {se}", info[(a, b)]);
        }
    }

    #[test]
    fn gaussian_efficiency_and_law_dependence() {
        let pr = mp(1.1, 0.9);
        let (x, spec, _) = problem(10, 14, mp(1.0, 1.0), 13);
        let gl = EffectLaws::same(SubGaussianLaw::GAUSSIAN.moments());
        let psi = asymptotic_cov(&pr, &spec, None, &gl).unwrap();
        let inv = gaussian_fisher(&pr, &spec).unwrap().try_inverse().unwrap();
        assert!((psi - inv).amax() <= 1e-8 * inv.amax());
        assert!((gaussian_fisher(&pr, &spec).unwrap()[(0, 0)] - 1.0 / (2.0 * 1.1f64.powi(2))).abs() < 1e-14);

        let rl = EffectLaws { beta: SubGaussianLaw::RADEMACHER.moments(), eps: SubGaussianLaw::GAUSSIAN.moments() };
        let psi_r = asymptotic_cov(&pr, &spec, Some(&x), &rl).unwrap();
        let j0 = expected_hessian(&pr, &pr, &spec).unwrap();
        let info_r = score_covariance(&pr, &spec, Some(&x), &rl).unwrap();
        let rebuilt = j0 * psi_r * j0;
        assert!((rebuilt - info_r).amax() <= 1e-9 * info_r.amax());
        assert!((psi_r - psi).amax() > 1e-6);
    }

    #[test]
    fn exact_recovery_instance() {
        let spec = random_spectrum(40, 21);
        let pr = mp(1.3, 0.8);
        let yc: Vec<f64> = spec.lambdas().iter().map(|l| (pr.sigma0_sq * (pr.eta0_sq * l + 1.0)).sqrt()).collect();
        let st = ScoreState::from_rotated(&spec, yc).unwrap();
        let fit = fit_mle(&st, &FitOptions::default()).unwrap();
        assert!((fit.theta_hat.eta0_sq - 0.8).abs() < 1e-6, "{:?}", fit.theta_hat);
        assert!((fit.theta_hat.sigma0_sq - 1.3).abs() < 1e-6);
        assert!(!fit.boundary_flag && !fit.identifiability_flag);
        assert!(fit.profile_score_at_hat.abs() < fit.tol_score);
        assert_eq!(fit.theta_hat.sigma0_sq, sigma_star_sq(&st, fit.theta_hat.eta0_sq).unwrap());
        assert!(fit.psi_hat.is_some());
    }

    #[test]
    fn fit_on_flat_spectrum_is_flagged() {
        let flat = GramSpectrum::from_eigenvalues(vec![1.0; 8], 8).unwrap();
        let st = ScoreState::from_rotated(&flat, vec![1.0, -2.0, 0.5, 0.3, 1.1, -0.7, 0.2, 0.9]).unwrap();
        let fit = fit_mle(&st, &FitOptions::default()).unwrap();
        assert!(fit.identifiability_flag);
        assert!(fit.psi_hat.is_none());
        let first = fit.eta_grid_trace[0].1;
        assert!(fit.eta_grid_trace.iter().all(|(_, v)| (v - first).abs() < 1e-10));
    }

    #[test]
    fn fit_rejects_zero_response() {
        let spec = random_spectrum(5, 1);
        let st = ScoreState::from_rotated(&spec, vec![0.0; 5]).unwrap();
        assert!(matches!(fit_mle(&st, &FitOptions::default()), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn fit_is_stationary_and_beats_the_grid() {
        for seed in 0..10 {
            let (_, spec, y) = problem(60, 120, mp(1.0, 1.0), 40 + seed);
            let st = ScoreState::new(&spec, &y).unwrap();
            let fit = fit_mle(&st, &FitOptions::default()).unwrap();
            let best_grid = fit.eta_grid_trace.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
            let at_hat = profile_loglik(&st, fit.theta_hat.eta0_sq).unwrap();
            assert!(at_hat >= best_grid - 1e-12);
            if !fit.boundary_flag {
                assert!(fit.profile_score_at_hat.abs() < fit.tol_score);
                let s = score(&st, &fit.theta_hat).unwrap();
                assert!(s[0].abs() < 1e-8 && s[1].abs() < 1e-8, "{s:?}");
            } else {
                assert!(profile_score(&st, 0.0).unwrap() <= 0.0);
            }
        }
    }

    #[test]
    fn profile_reduction_matches_two_dimensional_grid() {
        let (_, spec, y) = problem(30, 50, mp(1.0, 1.0), 55);
        let st = ScoreState::new(&spec, &y).unwrap();
        let etas: Vec<f64> = (0..40).map(|k| 0.1 * k as f64).collect();
        let prof_max = etas.iter().map(|&e| profile_loglik(&st, e).unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let mut grid_max = f64::NEG_INFINITY;
        for &e in &etas {
            for k in 1..2000 {
                let s2 = 0.002 * k as f64;
                grid_max = grid_max.max(loglik(&st, &mp(s2, e)).unwrap());
            }
        }
        assert!(grid_max <= prof_max + 1e-12);
        assert!(prof_max - grid_max < 1e-4);
    }

    #[test]
    fn scale_equivariance() {
        let (_, spec, y) = problem(40, 80, mp(1.0, 2.0), 60);
        let st = ScoreState::new(&spec, &y).unwrap();
        let base = fit_mle(&st, &FitOptions::default()).unwrap();
        for c in [0.1, 10.0] {
            let fit = fit_mle(&st.scaled(c), &FitOptions::default()).unwrap();
            assert!(rel(fit.theta_hat.sigma0_sq, c * c * base.theta_hat.sigma0_sq) < 1e-8);
            assert!((fit.theta_hat.eta0_sq - base.theta_hat.eta0_sq).abs() < 1e-6 * (1.0 + base.theta_hat.eta0_sq));
        }
    }

    #[test]
    fn golden_prefers_left_on_ties() {
        let t = golden_max(|_| 1.0, 0.0, 1.0, 1e-8);
        assert!(t < 1e-7);
        let t = golden_max(|x| -(x - 0.3).powi(2), 0.0, 1.0, 1e-10);
        assert!((t - 0.3).abs() < 1e-8);
    }

    #[test]
    fn fit_json_shape() {
        let spec = random_spectrum(20, 2);
        let pr = mp(1.0, 0.5);
        let yc: Vec<f64> = spec.lambdas().iter().map(|l| (pr.eta0_sq * l + 1.0).sqrt()).collect();
        let fit = fit_mle(&ScoreState::from_rotated(&spec, yc).unwrap(), &FitOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fit.to_json(true).unwrap()).unwrap();
        for key in ["sigma2_hat", "eta2_hat", "boundary", "identifiable", "psi", "trace"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["psi"].as_array().unwrap().len(), 4);
        let v: serde_json::Value = serde_json::from_str(&fit.to_json(false).unwrap()).unwrap();
        assert!(v.get("trace").is_none());
    }
}
